//! The toy split segmentation network.
//!
//! A patch embedding feeds two parallel token streams of width `embed_dim/2`:
//! a personalized stream and a global stream. Each encoder block applies
//! per-stream layer norm, a head-split multi-head self-attention where the
//! first `h/2` heads read and write the personalized stream and the last
//! `h/2` the global stream, and per-stream MLPs. The decoder mirrors the
//! split channel-wise: each stream gets its own 3x3 conv + 2x upsampling
//! stack, producing personalized features `f_p` and global features `f_g`.
//! A 1x1 segmentation head reads both; the appearance-regulation head reads
//! only `f_p` and reconstructs the input through a sigmoid.
//!
//! The streams never mix between the patch embedding and the segmentation
//! head, so perturbing global-tagged attention heads can never change the
//! reconstruction and perturbing personalized-tagged ones can never change
//! the global stream. That isolation is load-bearing for the protocol and
//! is checked bitwise in the tests.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{FlatParams, ParamTag, ParameterStore};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub img_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_channels: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            img_size: 32,
            patch_size: 4,
            embed_dim: 32,
            heads: 4,
            encoder_blocks: 2,
            decoder_channels: 16,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.heads % 2 != 0 {
            return err(format!("heads must be even and positive, got {}", self.heads));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return err(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.decoder_channels == 0 || self.decoder_channels % 2 != 0 {
            return err(format!(
                "decoder_channels must be even and positive, got {}",
                self.decoder_channels
            ));
        }
        // The decoder has two 2x upsampling levels, so tokens scale back to
        // pixels only for 4-pixel patches.
        if self.patch_size != 4 {
            return err(format!("patch_size must be 4, got {}", self.patch_size));
        }
        if self.img_size == 0 || self.img_size % self.patch_size != 0 {
            return err(format!(
                "img_size {} must be a multiple of patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.num_classes < 2 {
            return err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.encoder_blocks == 0 {
            return err("in_channels and encoder_blocks must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn d_head(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn half_dim(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn half_channels(&self) -> usize {
        self.decoder_channels / 2
    }
}

/// Everything one forward pass produces.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub f_p: Tensor,
    pub f_g: Tensor,
    pub recon: Tensor,
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

struct Norm {
    gamma: Tensor,
    beta: Tensor,
}

struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Per-head Q/K/V projections plus the two half output projections of one
/// attention layer. Head index `i < heads/2` is personalized, the rest are
/// global; each head projects its own stream's half of the input.
pub struct MsaLayer {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo_p: Tensor,
    pub wo_g: Tensor,
}

struct Block {
    ln1_p: Norm,
    ln1_g: Norm,
    msa: MsaLayer,
    ln2_p: Norm,
    ln2_g: Norm,
    mlp_p: Mlp,
    mlp_g: Mlp,
}

struct Conv {
    w: Tensor,
    b: Tensor,
}

pub struct SegModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    embed_p: Linear,
    embed_g: Linear,
    blocks: Vec<Block>,
    dec1_p: Conv,
    dec1_g: Conv,
    dec2_p: Conv,
    dec2_g: Conv,
    seg: Conv,
    har: Conv,
}

struct Builder<'a> {
    store: ParameterStore,
    rng: &'a mut ChaCha20Rng,
    gpd: bool,
}

impl<'a> Builder<'a> {
    /// Uniform(-a, a) with a = 1/sqrt(fan_in), drawn in store order.
    fn weight(&mut self, name: &str, tag: ParamTag, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let a = 1.0 / (fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.rng.gen::<f32>() * 2.0 * a - a).collect();
        self.add(name, tag, Tensor::from_vec(shape, data, true).unwrap())
    }

    fn constant(&mut self, name: &str, tag: ParamTag, shape: Vec<usize>, v: f32) -> Tensor {
        let n: usize = shape.iter().product();
        self.add(name, tag, Tensor::from_vec(shape, vec![v; n], true).unwrap())
    }

    fn add(&mut self, name: &str, tag: ParamTag, t: Tensor) -> Tensor {
        let tag = if self.gpd { tag } else { ParamTag::Global };
        self.store.add(name, tag, t)
    }

    fn linear(&mut self, prefix: &str, tag: ParamTag, inp: usize, out: usize) -> Linear {
        Linear {
            w: self.weight(&format!("{prefix}.w"), tag, vec![inp, out], inp),
            b: self.weight(&format!("{prefix}.b"), tag, vec![out], inp),
        }
    }

    fn norm(&mut self, prefix: &str, tag: ParamTag, dim: usize) -> Norm {
        Norm {
            gamma: self.constant(&format!("{prefix}.gamma"), tag, vec![dim], 1.0),
            beta: self.constant(&format!("{prefix}.beta"), tag, vec![dim], 0.0),
        }
    }

    fn mlp(&mut self, prefix: &str, tag: ParamTag, dim: usize, hidden: usize) -> Mlp {
        Mlp {
            w1: self.weight(&format!("{prefix}.w1"), tag, vec![dim, hidden], dim),
            b1: self.weight(&format!("{prefix}.b1"), tag, vec![hidden], dim),
            w2: self.weight(&format!("{prefix}.w2"), tag, vec![hidden, dim], hidden),
            b2: self.weight(&format!("{prefix}.b2"), tag, vec![dim], hidden),
        }
    }

    fn conv(&mut self, prefix: &str, tag: ParamTag, co: usize, ci: usize, k: usize) -> Conv {
        let fan_in = ci * k * k;
        Conv {
            w: self.weight(&format!("{prefix}.w"), tag, vec![co, ci, k, k], fan_in),
            b: self.weight(&format!("{prefix}.b"), tag, vec![co], fan_in),
        }
    }
}

impl SegModel {
    /// Build a freshly initialized model. With `gpd` off every parameter is
    /// tagged Global and the personalized subset is empty.
    pub fn new(config: ModelConfig, rng: &mut ChaCha20Rng, gpd: bool) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParameterStore::new(),
            rng,
            gpd,
        };
        let half = config.half_dim();
        let dh = config.d_head();
        let patch_cols = config.in_channels * config.patch_size * config.patch_size;
        let embed_p = b.linear("embed.p", ParamTag::Global, patch_cols, half);
        let embed_g = b.linear("embed.g", ParamTag::Global, patch_cols, half);
        let mut blocks = Vec::new();
        for bi in 0..config.encoder_blocks {
            let ln1_p = b.norm(&format!("enc{bi}.p.ln1"), ParamTag::Global, half);
            let ln1_g = b.norm(&format!("enc{bi}.g.ln1"), ParamTag::Global, half);
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for hi in 0..config.heads {
                let tag = if hi < config.heads / 2 {
                    ParamTag::Personalized
                } else {
                    ParamTag::Global
                };
                wq.push(b.weight(&format!("enc{bi}.msa.h{hi}.wq"), tag, vec![half, dh], half));
                wk.push(b.weight(&format!("enc{bi}.msa.h{hi}.wk"), tag, vec![half, dh], half));
                wv.push(b.weight(&format!("enc{bi}.msa.h{hi}.wv"), tag, vec![half, dh], half));
            }
            let wo_p = b.weight(
                &format!("enc{bi}.msa.wo.p"),
                ParamTag::Personalized,
                vec![half, half],
                half,
            );
            let wo_g = b.weight(&format!("enc{bi}.msa.wo.g"), ParamTag::Global, vec![half, half], half);
            let ln2_p = b.norm(&format!("enc{bi}.p.ln2"), ParamTag::Global, half);
            let ln2_g = b.norm(&format!("enc{bi}.g.ln2"), ParamTag::Global, half);
            let mlp_p = b.mlp(&format!("enc{bi}.p.mlp"), ParamTag::Global, half, 2 * half);
            let mlp_g = b.mlp(&format!("enc{bi}.g.mlp"), ParamTag::Global, half, 2 * half);
            blocks.push(Block {
                ln1_p,
                ln1_g,
                msa: MsaLayer { wq, wk, wv, wo_p, wo_g },
                ln2_p,
                ln2_g,
                mlp_p,
                mlp_g,
            });
        }
        let hc = config.half_channels();
        let dec1_p = b.conv("dec1.p", ParamTag::Personalized, hc, half, 3);
        let dec1_g = b.conv("dec1.g", ParamTag::Global, hc, half, 3);
        let dec2_p = b.conv("dec2.p", ParamTag::Personalized, hc, hc, 3);
        let dec2_g = b.conv("dec2.g", ParamTag::Global, hc, hc, 3);
        let seg = b.conv("seg", ParamTag::Global, config.num_classes, config.decoder_channels, 1);
        let har = b.conv("har", ParamTag::Personalized, config.in_channels, hc, 1);
        Ok(SegModel {
            config,
            store: b.store,
            embed_p,
            embed_g,
            blocks,
            dec1_p,
            dec1_g,
            dec2_p,
            dec2_g,
            seg,
            har,
        })
    }

    /// Full forward pass on one `[in_channels, img, img]` image.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let c = &self.config;
        let expect = [c.in_channels, c.img_size, c.img_size];
        if image.shape() != expect {
            return Err(Error::Shape(format!(
                "forward input {:?}, model expects {:?}",
                image.shape(),
                expect
            )));
        }
        let patches = image.patchify(c.patch_size)?;
        let mut zp = patches
            .matmul(&self.embed_p.w)?
            .add_row_bias(&self.embed_p.b)?;
        let mut zg = patches
            .matmul(&self.embed_g.w)?
            .add_row_bias(&self.embed_g.b)?;
        for blk in &self.blocks {
            let zpn = zp.layer_norm(&blk.ln1_p.gamma, &blk.ln1_p.beta, LN_EPS)?;
            let zgn = zg.layer_norm(&blk.ln1_g.gamma, &blk.ln1_g.beta, LN_EPS)?;
            let z = zpn.concat(&zgn, 1)?;
            let (ap, ag) = gpd_msa(&z, &blk.msa, c.heads)?;
            zp = zp.add(&ap)?;
            zg = zg.add(&ag)?;
            let mp = mlp_forward(&zp.layer_norm(&blk.ln2_p.gamma, &blk.ln2_p.beta, LN_EPS)?, &blk.mlp_p)?;
            zp = zp.add(&mp)?;
            let mg = mlp_forward(&zg.layer_norm(&blk.ln2_g.gamma, &blk.ln2_g.beta, LN_EPS)?, &blk.mlp_g)?;
            zg = zg.add(&mg)?;
        }
        let g = c.grid();
        let f_p = decode_stream(&zp.tokens_to_map(g, g)?, &self.dec1_p, &self.dec2_p)?;
        let f_g = decode_stream(&zg.tokens_to_map(g, g)?, &self.dec1_g, &self.dec2_g)?;
        let feats = f_p.concat(&f_g, 0)?;
        let logits = feats.conv2d(&self.seg.w, 1, 0)?.add_chan_bias(&self.seg.b)?;
        let recon = f_p
            .conv2d(&self.har.w, 1, 0)?
            .add_chan_bias(&self.har.b)?
            .sigmoid();
        Ok(ForwardOutput { logits, f_p, f_g, recon })
    }

    /// Split every parameter into the global and personalized snapshots.
    pub fn partition(&self) -> (FlatParams, FlatParams) {
        (
            self.store.flatten(ParamTag::Global),
            self.store.flatten(ParamTag::Personalized),
        )
    }

    pub fn attention_layer(&self, block: usize) -> &MsaLayer {
        &self.blocks[block].msa
    }
}

fn mlp_forward(x: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    x.matmul(&mlp.w1)?
        .add_row_bias(&mlp.b1)?
        .silu()
        .matmul(&mlp.w2)?
        .add_row_bias(&mlp.b2)
}

fn decode_stream(map: &Tensor, c1: &Conv, c2: &Conv) -> Result<Tensor> {
    let x = map
        .upsample2x()?
        .conv2d(&c1.w, 1, 1)?
        .add_chan_bias(&c1.b)?
        .silu();
    Ok(x.upsample2x()?
        .conv2d(&c2.w, 1, 1)?
        .add_chan_bias(&c2.b)?
        .silu())
}

/// Head-split multi-head self-attention on `[tokens, embed_dim]` input.
///
/// The first `h/2` heads project the first half of `z` (the personalized
/// stream), the last `h/2` the second half. Per head, attention is
/// `softmax(Q K^T / sqrt(d_head)) V`; the concatenated per-stream head
/// outputs pass through that stream's half output projection. Returns
/// `(z_p, z_g)`, each `[tokens, embed_dim/2]`.
pub fn gpd_msa(z: &Tensor, msa: &MsaLayer, heads: usize) -> Result<(Tensor, Tensor)> {
    let (zp, zg, _) = gpd_msa_with_attention(z, msa, heads)?;
    Ok((zp, zg))
}

/// Same as [`gpd_msa`] but also returns the per-head attention matrices
/// (each `[tokens, tokens]`, row-stochastic), used by invariant tests.
pub fn gpd_msa_with_attention(
    z: &Tensor,
    msa: &MsaLayer,
    heads: usize,
) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
    let s = z.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("gpd_msa input {:?}", s)));
    }
    if heads == 0 || heads % 2 != 0 {
        return Err(Error::Config(format!("gpd_msa heads must be even, got {heads}")));
    }
    let dim = s[1];
    if dim % heads != 0 || msa.wq.len() != heads {
        return Err(Error::Shape(format!(
            "gpd_msa dim {} with {} heads ({} projections)",
            dim,
            heads,
            msa.wq.len()
        )));
    }
    let half = dim / 2;
    let d_head = dim / heads;
    let hp = heads / 2;
    let zp_in = z.slice_axis(1, 0, half)?;
    let zg_in = z.slice_axis(1, half, half)?;
    let scale = 1.0 / (d_head as f32).sqrt();
    let mut attn = Vec::with_capacity(heads);
    let mut run_stream = |src: &Tensor, lo: usize| -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(hp);
        for hi in lo..lo + hp {
            let q = src.matmul(&msa.wq[hi])?;
            let k = src.matmul(&msa.wk[hi])?;
            let v = src.matmul(&msa.wv[hi])?;
            let a = q.matmul(&k.transpose2()?)?.scale(scale).softmax(1)?;
            attn.push(a.clone());
            outs.push(a.matmul(&v)?);
        }
        Ok(outs)
    };
    let heads_p = run_stream(&zp_in, 0)?;
    let heads_g = run_stream(&zg_in, hp)?;
    let cat = |hs: Vec<Tensor>| -> Result<Tensor> {
        let mut it = hs.into_iter();
        let mut acc = it.next().expect("at least one head");
        for h in it {
            acc = acc.concat(&h, 1)?;
        }
        Ok(acc)
    };
    let z_p = cat(heads_p)?.matmul(&msa.wo_p)?;
    let z_g = cat(heads_g)?.matmul(&msa.wo_g)?;
    Ok((z_p, z_g, attn))
}
