//! Shared test oracles: independent f64 reference implementations of the
//! tensor ops, the model forward pass, the losses, the aggregation
//! equations and the metrics, plus finite-difference helpers. Everything
//! here is deliberately written as plain loops, separate from the library's
//! implementation path.

#![allow(dead_code)]

pub mod refmodel;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

// ---------------------------------------------------------------------------
// Random helpers
// ---------------------------------------------------------------------------

pub fn rand_vec(r: &mut ChaCha20Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| lo + (hi - lo) * r.gen::<f32>()).collect()
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

// ---------------------------------------------------------------------------
// f64 reference ops
// ---------------------------------------------------------------------------

pub fn matmul64(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub fn transpose64(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Softmax along `axis` of a tensor with `shape`.
pub fn softmax64(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..lane {
                mx = mx.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..lane {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..lane {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

pub fn log_softmax64(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let sm = softmax64(x, shape, axis);
    sm.iter().map(|&p| p.ln()).collect()
}

pub fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm64(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mean) * inv * gamma[c] + beta[c];
        }
    }
    out
}

/// Direct six-loop cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn conv2d64(
    x: &[f64],
    w: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x[(ic * h + iy as usize) * wd + ix as usize]
                                * w[((oc * ci + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn upsample2x64(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn patchify64(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let cols = c * p * p;
    let mut out = vec![0.0; gh * gw * cols];
    for py in 0..gh {
        for px in 0..gw {
            let t = py * gw + px;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[t * cols + (ch * p + dy) * p + dx] =
                            x[(ch * h + py * p + dy) * w + px * p + dx];
                    }
                }
            }
        }
    }
    out
}

pub fn tokens_to_map64(z: &[f64], gh: usize, gw: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            for ch in 0..c {
                out[(ch * gh + y) * gw + x] = z[(y * gw + x) * c + ch];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

pub const FD_H: f64 = 1e-3;

/// Central finite differences of `eval` at `xs`, one coordinate at a time.
pub fn fd_grad(xs: &[f32], eval: &mut dyn FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; xs.len()];
    let mut work: Vec<f32> = xs.to_vec();
    for i in 0..xs.len() {
        let orig = work[i];
        work[i] = (f64::from(orig) + FD_H) as f32;
        let up = eval(&work);
        work[i] = (f64::from(orig) - FD_H) as f32;
        let down = eval(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * FD_H);
    }
    grad
}

/// Relative-with-floor gradient comparison: passes when
/// `|got - want| <= atol + rtol * max(|got|, |want|)` for every pair.
pub fn assert_grads_close(got: &[f32], want: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let g = f64::from(g);
        let err = (g - w).abs();
        let tol = atol + rtol * g.abs().max(w.abs());
        assert!(
            err <= tol,
            "{what}[{i}]: grad {g} vs reference {w} (err {err:.3e} > tol {tol:.3e})"
        );
    }
}

// ---------------------------------------------------------------------------
// Aggregation equation references
// ---------------------------------------------------------------------------

/// Layer-wise weighted mixing: out[l] = sum_i omega[l][i] * uploads[i][l].
pub fn personalize_ref(uploads: &[Vec<Vec<f64>>], omega: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let layers = uploads[0].len();
    (0..layers)
        .map(|l| {
            let len = uploads[0][l].len();
            let mut acc = vec![0.0; len];
            for (i, up) in uploads.iter().enumerate() {
                for (a, &v) in acc.iter_mut().zip(&up[l]) {
                    *a += omega[l][i] * v;
                }
            }
            acc
        })
        .collect()
}

/// Convex style mixing: beta = sum lambda_i mu_i, gamma = sum lambda_i sigma_i.
pub fn mix_ref(mus: &[[f64; 3]], sigmas: &[[f64; 3]], lambdas: &[f64]) -> ([f64; 3], [f64; 3]) {
    let mut beta = [0.0; 3];
    let mut gamma = [0.0; 3];
    for (i, &l) in lambdas.iter().enumerate() {
        for c in 0..3 {
            beta[c] += l * mus[i][c];
            gamma[c] += l * sigmas[i][c];
        }
    }
    (beta, gamma)
}

/// Canonical affine distortion gamma*(I-mu)/sigma + beta with [0,1] clamp.
pub fn distort_ref(img: &[f64], mu: &[f64; 3], sigma: &[f64; 3], beta: &[f64; 3], gamma: &[f64; 3]) -> Vec<f64> {
    let n = img.len() / 3;
    let mut out = vec![0.0; img.len()];
    for c in 0..3 {
        for i in 0..n {
            let v = gamma[c] * (img[c * n + i] - mu[c]) / sigma[c] + beta[c];
            out[c * n + i] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Per-scalar softmax-weighted mixing of global uploads.
pub fn sge_ref(all_g: &[Vec<f64>], sens: &[Vec<f64>], temperature: f64) -> Vec<f64> {
    let n = all_g[0].len();
    let m = all_g.len();
    let mut out = vec![0.0; n];
    for p in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for s in sens {
            mx = mx.max(s[p] / temperature);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..m {
            let e = (sens[i][p] / temperature - mx).exp();
            num += e * all_g[i][p];
            den += e;
        }
        out[p] = num / den;
    }
    out
}

pub fn fedavg_ref(all: &[Vec<f64>], counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let n = all[0].len();
    let mut out = vec![0.0; n];
    for (i, up) in all.iter().enumerate() {
        let w = counts[i] as f64 / total as f64;
        for (o, &v) in out.iter_mut().zip(up) {
            *o += w * v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Brute-force metric references
// ---------------------------------------------------------------------------

pub fn region_ref(pred: &[u8], gt: &[u8], class: u8) -> Option<(f64, f64)> {
    let np = pred.iter().filter(|&&v| v == class).count();
    let ng = gt.iter().filter(|&&v| v == class).count();
    let inter = pred
        .iter()
        .zip(gt)
        .filter(|(&p, &g)| p == class && g == class)
        .count();
    if np == 0 && ng == 0 {
        return None; // both-empty convention handled by the caller
    }
    let dice = 200.0 * inter as f64 / (np + ng) as f64;
    let iou = 100.0 * inter as f64 / (np + ng - inter) as f64;
    Some((dice, iou))
}

fn boundary_ref(mask: &[u8], h: usize, w: usize, class: u8) -> Vec<(f64, f64)> {
    let inside = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask[y as usize * w + x as usize] == class
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != class {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn percentile_ref(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// All-pairs surface distances: (assd, hd95), or None when a side is empty.
pub fn surface_ref(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8) -> Option<(f64, f64)> {
    let bp = boundary_ref(pred, h, w, class);
    let bg = boundary_ref(gt, h, w, class);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|&(ay, ax)| {
                to.iter()
                    .map(|&(by, bx)| ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let d1 = directed(&bp, &bg);
    let d2 = directed(&bg, &bp);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let assd = 0.5 * (mean(&d1) + mean(&d2));
    let mut pooled: Vec<f64> = d1.into_iter().chain(d2).collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some((assd, percentile_ref(&pooled, 0.95)))
}

// ---------------------------------------------------------------------------
// Hypernetwork surrogate reference (f64)
// ---------------------------------------------------------------------------

/// f64 re-implementation of the hypernetwork's surrogate scalar
/// S = sum_{l,i} omega_{l,i} * <uploads[i][l], delta[l]> from raw weights.
pub struct HnRef {
    pub layers: usize,
    pub sites: usize,
}

impl HnRef {
    #[allow(clippy::too_many_arguments)]
    pub fn surrogate(
        &self,
        nu: &[f64],
        w1: &[f64],
        b1: &[f64],
        w2: &[f64],
        b2: &[f64],
        uploads: &[Vec<Vec<f64>>],
        delta: &[Vec<f64>],
    ) -> f64 {
        let d = nu.len();
        let hidden = b1.len();
        let out = self.layers * self.sites;
        let mut hid = vec![0.0; hidden];
        for j in 0..hidden {
            let mut acc = b1[j];
            for i in 0..d {
                acc += nu[i] * w1[i * hidden + j];
            }
            hid[j] = acc.tanh();
        }
        let mut logits = vec![0.0; out];
        for j in 0..out {
            let mut acc = b2[j];
            for i in 0..hidden {
                acc += hid[i] * w2[i * out + j];
            }
            logits[j] = acc;
        }
        let omega = softmax64(&logits, &[self.layers, self.sites], 1);
        let mut s = 0.0;
        for l in 0..self.layers {
            for i in 0..self.sites {
                let dot: f64 = uploads[i][l].iter().zip(&delta[l]).map(|(a, b)| a * b).sum();
                s += omega[l * self.sites + i] * dot;
            }
        }
        s
    }
}
