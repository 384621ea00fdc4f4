//! Independent f64 reference of the split segmentation model and the three
//! losses, driven purely by a named flat parameter snapshot. Used as the
//! finite-difference and forward oracle for the engine implementation.

use std::collections::HashMap;

use fedsis_core::model::ModelConfig;
use fedsis_core::params::FlatParams;

use super::{
    conv2d64, layer_norm64, matmul64, patchify64, sigmoid64, silu64, softmax64, tokens_to_map64,
    transpose64,
};

const LN_EPS: f64 = 1e-5;

pub struct RefModel {
    pub cfg: ModelConfig,
    params: HashMap<String, Vec<f64>>,
}

pub struct RefForward {
    pub logits: Vec<f64>,
    pub f_p: Vec<f64>,
    pub f_g: Vec<f64>,
    pub recon: Vec<f64>,
}

fn add_row_bias64(x: &mut [f64], b: &[f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            x[r * cols + c] += b[c];
        }
    }
}

fn add_chan_bias64(x: &mut [f64], b: &[f64], c: usize, hw: usize) {
    for ch in 0..c {
        for i in 0..hw {
            x[ch * hw + i] += b[ch];
        }
    }
}

impl RefModel {
    pub fn from_flat(cfg: ModelConfig, all: &FlatParams) -> Self {
        let params = all
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), v.iter().map(|&x| f64::from(x)).collect()))
            .collect();
        RefModel { cfg, params }
    }

    fn get(&self, name: &str) -> &[f64] {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn attention_stream(&self, src: &[f64], t: usize, block: usize, head_lo: usize) -> Vec<f64> {
        let half = self.cfg.half_dim();
        let dh = self.cfg.d_head();
        let hp = self.cfg.heads / 2;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut cat = vec![0.0; t * half];
        for (slot, hi) in (head_lo..head_lo + hp).enumerate() {
            let wq = self.get(&format!("enc{block}.msa.h{hi}.wq"));
            let wk = self.get(&format!("enc{block}.msa.h{hi}.wk"));
            let wv = self.get(&format!("enc{block}.msa.h{hi}.wv"));
            let q = matmul64(src, wq, t, half, dh);
            let k = matmul64(src, wk, t, half, dh);
            let v = matmul64(src, wv, t, half, dh);
            let kt = transpose64(&k, t, dh);
            let mut scores = matmul64(&q, &kt, t, dh, t);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            let attn = softmax64(&scores, &[t, t], 1);
            let head_out = matmul64(&attn, &v, t, t, dh);
            for row in 0..t {
                for c in 0..dh {
                    cat[row * half + slot * dh + c] = head_out[row * dh + c];
                }
            }
        }
        cat
    }

    fn decode_stream(&self, map: &[f64], prefix_p: bool) -> Vec<f64> {
        let g = self.cfg.grid();
        let half = self.cfg.half_dim();
        let hc = self.cfg.half_channels();
        let tag = if prefix_p { "p" } else { "g" };
        let up1 = super::upsample2x64(map, half, g, g);
        let mut x = conv2d64(
            &up1,
            self.get(&format!("dec1.{tag}.w")),
            half,
            2 * g,
            2 * g,
            hc,
            3,
            1,
            1,
        );
        add_chan_bias64(&mut x, self.get(&format!("dec1.{tag}.b")), hc, 4 * g * g);
        for v in x.iter_mut() {
            *v = silu64(*v);
        }
        let up2 = super::upsample2x64(&x, hc, 2 * g, 2 * g);
        let mut y = conv2d64(
            &up2,
            self.get(&format!("dec2.{tag}.w")),
            hc,
            4 * g,
            4 * g,
            hc,
            3,
            1,
            1,
        );
        add_chan_bias64(&mut y, self.get(&format!("dec2.{tag}.b")), hc, 16 * g * g);
        for v in y.iter_mut() {
            *v = silu64(*v);
        }
        y
    }

    pub fn forward(&self, image: &[f64]) -> RefForward {
        let c = &self.cfg;
        let s = c.img_size;
        let t = c.tokens();
        let half = c.half_dim();
        let cols = c.in_channels * c.patch_size * c.patch_size;
        let patches = patchify64(image, c.in_channels, s, s, c.patch_size);
        let mut zp = matmul64(&patches, self.get("embed.p.w"), t, cols, half);
        add_row_bias64(&mut zp, self.get("embed.p.b"), t, half);
        let mut zg = matmul64(&patches, self.get("embed.g.w"), t, cols, half);
        add_row_bias64(&mut zg, self.get("embed.g.b"), t, half);
        for bi in 0..c.encoder_blocks {
            let zpn = layer_norm64(
                &zp,
                self.get(&format!("enc{bi}.p.ln1.gamma")),
                self.get(&format!("enc{bi}.p.ln1.beta")),
                t,
                half,
                LN_EPS,
            );
            let zgn = layer_norm64(
                &zg,
                self.get(&format!("enc{bi}.g.ln1.gamma")),
                self.get(&format!("enc{bi}.g.ln1.beta")),
                t,
                half,
                LN_EPS,
            );
            let cat_p = self.attention_stream(&zpn, t, bi, 0);
            let cat_g = self.attention_stream(&zgn, t, bi, c.heads / 2);
            let ap = matmul64(&cat_p, self.get(&format!("enc{bi}.msa.wo.p")), t, half, half);
            let ag = matmul64(&cat_g, self.get(&format!("enc{bi}.msa.wo.g")), t, half, half);
            for (z, a) in zp.iter_mut().zip(&ap) {
                *z += a;
            }
            for (z, a) in zg.iter_mut().zip(&ag) {
                *z += a;
            }
            for (stream, tagc) in [(&mut zp, 'p'), (&mut zg, 'g')] {
                let ln = layer_norm64(
                    stream,
                    self.get(&format!("enc{bi}.{tagc}.ln2.gamma")),
                    self.get(&format!("enc{bi}.{tagc}.ln2.beta")),
                    t,
                    half,
                    LN_EPS,
                );
                let mut h = matmul64(&ln, self.get(&format!("enc{bi}.{tagc}.mlp.w1")), t, half, 2 * half);
                add_row_bias64(&mut h, self.get(&format!("enc{bi}.{tagc}.mlp.b1")), t, 2 * half);
                for v in h.iter_mut() {
                    *v = silu64(*v);
                }
                let mut o = matmul64(&h, self.get(&format!("enc{bi}.{tagc}.mlp.w2")), t, 2 * half, half);
                add_row_bias64(&mut o, self.get(&format!("enc{bi}.{tagc}.mlp.b2")), t, half);
                for (z, v) in stream.iter_mut().zip(&o) {
                    *z += v;
                }
            }
        }
        let g = c.grid();
        let map_p = tokens_to_map64(&zp, g, g, half);
        let map_g = tokens_to_map64(&zg, g, g, half);
        let f_p = self.decode_stream(&map_p, true);
        let f_g = self.decode_stream(&map_g, false);
        let hc = c.half_channels();
        let hw = s * s;
        let mut feats = vec![0.0; 2 * hc * hw];
        feats[..hc * hw].copy_from_slice(&f_p);
        feats[hc * hw..].copy_from_slice(&f_g);
        let mut logits = conv2d64(&feats, self.get("seg.w"), 2 * hc, s, s, c.num_classes, 1, 1, 0);
        add_chan_bias64(&mut logits, self.get("seg.b"), c.num_classes, hw);
        let mut recon = conv2d64(&f_p, self.get("har.w"), hc, s, s, c.in_channels, 1, 1, 0);
        add_chan_bias64(&mut recon, self.get("har.b"), c.in_channels, hw);
        for v in recon.iter_mut() {
            *v = sigmoid64(*v);
        }
        RefForward {
            logits,
            f_p,
            f_g,
            recon,
        }
    }

    pub fn seg_loss(&self, logits: &[f64], labels: &[u8]) -> f64 {
        let k = self.cfg.num_classes;
        let hw = labels.len();
        let lsm = super::log_softmax64(logits, &[k, self.cfg.img_size, self.cfg.img_size], 0);
        let mut acc = 0.0;
        for (px, &l) in labels.iter().enumerate() {
            acc -= lsm[(l as usize) * hw + px];
        }
        acc / hw as f64
    }

    pub fn ar_loss(recon: &[f64], image: &[f64]) -> f64 {
        recon
            .iter()
            .zip(image)
            .map(|(r, i)| (r - i) * (r - i))
            .sum()
    }

    pub fn csc_loss(&self, logits: &[f64], labels: &[u8]) -> f64 {
        let k = self.cfg.num_classes;
        let hw = labels.len();
        let probs = softmax64(logits, &[k, self.cfg.img_size, self.cfg.img_size], 0);
        let mut acc = 0.0;
        for c in 0..k {
            for (px, &l) in labels.iter().enumerate() {
                let y = if l as usize == c { 1.0 } else { 0.0 };
                let d = probs[c * hw + px] - y;
                acc += d * d;
            }
        }
        acc
    }

    /// `w_seg * seg(I) + w_ar * ar(I) + w_csc * csc(I_d)` on clean and
    /// distorted images.
    pub fn combined_loss(
        &self,
        image: &[f64],
        distorted: &[f64],
        labels: &[u8],
        weights: (f64, f64, f64),
    ) -> f64 {
        let clean = self.forward(image);
        let dist = self.forward(distorted);
        weights.0 * self.seg_loss(&clean.logits, labels)
            + weights.1 * Self::ar_loss(&clean.recon, image)
            + weights.2 * self.csc_loss(&dist.logits, labels)
    }
}
