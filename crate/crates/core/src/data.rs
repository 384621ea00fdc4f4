//! Synthetic multi-site dataset generation and style statistics.
//!
//! Every site renders the same shape vocabulary — an elongated shaft, a
//! round wrist joint and two jaw prongs, randomly posed over a textured
//! background — but with site-specific appearance (palette, contrast,
//! texture). Heterogeneity across sites is the point: shapes are shared,
//! styles are not.
//!
//! Class ids are fixed: 0 background, 1 shaft, 2 wrist, 3 jaws.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const CLASSES: usize = 4;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub img_size: usize,
    /// Training samples per site (length must equal the site count).
    pub train_sizes: Vec<usize>,
    pub test_size: usize,
    /// 0.0 collapses all sites onto one neutral style; 1.0 is the full
    /// heterogeneous benchmark.
    pub style_strength: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            img_size: 32,
            train_sizes: vec![256, 256, 512],
            test_size: 64,
            style_strength: 1.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, sites: usize) -> Result<()> {
        if self.train_sizes.len() != sites {
            return Err(Error::Config(format!(
                "train_sizes has {} entries for {} sites",
                self.train_sizes.len(),
                sites
            )));
        }
        if self.train_sizes.iter().any(|&n| n == 0) || self.test_size == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.img_size < 16 {
            return Err(Error::Config(format!(
                "img_size {} too small for the shape renderer",
                self.img_size
            )));
        }
        if !(0.0..=1.0).contains(&self.style_strength) {
            return Err(Error::Config("style_strength must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-channel mean and standard deviation of one site's training images —
/// the only statistics a site ever shares (6 scalars).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub mu: [f32; 3],
    pub sigma: [f32; 3],
}

pub const SIGMA_FLOOR: f32 = 1e-3;

impl StyleStats {
    pub fn new(mu: [f32; 3], sigma: [f32; 3]) -> Self {
        StyleStats {
            mu,
            sigma: sigma.map(|s| s.max(SIGMA_FLOOR)),
        }
    }

    /// Number of scalars this struct transmits.
    pub const SCALARS: usize = 6;
}

/// The style-memory set: one [`StyleStats`] per site, fixed after the
/// initial broadcast.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleMemory {
    pub stats: Vec<StyleStats>,
}

impl StyleMemory {
    pub fn scalar_count(&self) -> usize {
        self.stats.len() * StyleStats::SCALARS
    }
}

/// One image/mask pair. Images are CHW in [0, 1].
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Vec<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn image_tensor(&self, img_size: usize) -> Tensor {
        Tensor::from_vec(
            vec![CHANNELS, img_size, img_size],
            self.image.clone(),
            false,
        )
        .unwrap()
    }
}

/// Site-specific appearance knobs, a pure function of (site, strength).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteStyle {
    pub base_rgb: [f32; 3],
    pub accent_rgb: [f32; 3],
    pub instrument_tint: [f32; 3],
    pub contrast: f32,
    pub brightness: f32,
    pub texture_amp: f32,
    pub texture_freq: f32,
}

#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub site: usize,
    pub img_size: usize,
    pub style: SiteStyle,
    pub samples: Vec<Sample>,
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)]
}

/// Deterministic site appearance. Sites 0..2 get hand-picked, strongly
/// separated palettes; further sites rotate hue by the golden angle.
pub fn site_style(site: usize, strength: f32) -> SiteStyle {
    let neutral = SiteStyle {
        base_rgb: [0.40, 0.40, 0.40],
        accent_rgb: [0.50, 0.50, 0.50],
        instrument_tint: [0.72, 0.72, 0.72],
        contrast: 1.0,
        brightness: 0.0,
        texture_amp: 0.06,
        texture_freq: 1.0,
    };
    let full = match site {
        0 => SiteStyle {
            base_rgb: [0.46, 0.15, 0.13],
            accent_rgb: [0.64, 0.29, 0.22],
            instrument_tint: [0.78, 0.73, 0.66],
            contrast: 1.00,
            brightness: 0.00,
            texture_amp: 0.06,
            texture_freq: 1.0,
        },
        1 => SiteStyle {
            base_rgb: [0.13, 0.42, 0.33],
            accent_rgb: [0.22, 0.56, 0.47],
            instrument_tint: [0.66, 0.73, 0.78],
            contrast: 0.90,
            brightness: 0.05,
            texture_amp: 0.10,
            texture_freq: 2.0,
        },
        2 => SiteStyle {
            base_rgb: [0.55, 0.60, 0.79],
            accent_rgb: [0.71, 0.76, 0.89],
            instrument_tint: [0.82, 0.79, 0.72],
            contrast: 1.15,
            brightness: 0.10,
            texture_amp: 0.04,
            texture_freq: 0.5,
        },
        m => {
            let hue = (m as f32) * 0.618_034;
            let hue = hue - hue.floor();
            let base = hsv_to_rgb(hue, 0.55, 0.45);
            let accent = hsv_to_rgb(hue, 0.45, 0.60);
            SiteStyle {
                base_rgb: base,
                accent_rgb: accent,
                instrument_tint: [0.75, 0.74, 0.70],
                contrast: 1.0 + 0.05 * ((m % 5) as f32 - 2.0),
                brightness: 0.02 * ((m % 7) as f32 - 3.0),
                texture_amp: 0.05 + 0.01 * ((m % 3) as f32),
                texture_freq: 0.5 + 0.5 * ((m % 4) as f32),
            }
        }
    };
    SiteStyle {
        base_rgb: lerp3(neutral.base_rgb, full.base_rgb, strength),
        accent_rgb: lerp3(neutral.accent_rgb, full.accent_rgb, strength),
        instrument_tint: lerp3(neutral.instrument_tint, full.instrument_tint, strength),
        contrast: lerp(neutral.contrast, full.contrast, strength),
        brightness: lerp(neutral.brightness, full.brightness, strength),
        texture_amp: lerp(neutral.texture_amp, full.texture_amp, strength),
        texture_freq: lerp(neutral.texture_freq, full.texture_freq, strength),
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn dist_point_segment(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

struct Pose {
    wx: f32,
    wy: f32,
    dir: (f32, f32),
    shaft_len: f32,
    shaft_hw: f32,
    wrist_r: f32,
    jaw_len: f32,
    jaw_hw: f32,
    jaw_open: f32,
}

fn draw_pose(r: &mut ChaCha20Rng, s: f32) -> Pose {
    // Pixel floors keep every part at least one pixel wide on small grids.
    let wx = s * (0.32 + 0.36 * r.gen::<f32>());
    let wy = s * (0.32 + 0.36 * r.gen::<f32>());
    let theta = r.gen::<f32>() * std::f32::consts::TAU;
    Pose {
        wx,
        wy,
        dir: (theta.cos(), theta.sin()),
        shaft_len: s * (0.35 + 0.15 * r.gen::<f32>()),
        shaft_hw: (s * (0.05 + 0.03 * r.gen::<f32>())).max(0.9),
        wrist_r: (s * (0.09 + 0.04 * r.gen::<f32>())).max(1.4),
        jaw_len: (s * (0.16 + 0.09 * r.gen::<f32>())).max(3.0),
        jaw_hw: (s * (0.030 + 0.012 * r.gen::<f32>())).max(0.6),
        jaw_open: 0.30 + 0.30 * r.gen::<f32>(),
    }
}

/// Pixel class under the pose, jaws over wrist over shaft.
fn classify(pose: &Pose, px: f32, py: f32) -> u8 {
    let (dx, dy) = pose.dir;
    let base_angle = dy.atan2(dx);
    for sgn in [-1.0f32, 1.0] {
        let a = base_angle + sgn * pose.jaw_open;
        let tipx = pose.wx + a.cos() * (pose.wrist_r + pose.jaw_len);
        let tipy = pose.wy + a.sin() * (pose.wrist_r + pose.jaw_len);
        if dist_point_segment(px, py, pose.wx, pose.wy, tipx, tipy) <= pose.jaw_hw {
            return 3;
        }
    }
    let dw = ((px - pose.wx) * (px - pose.wx) + (py - pose.wy) * (py - pose.wy)).sqrt();
    if dw <= pose.wrist_r {
        return 2;
    }
    let tailx = pose.wx - dx * pose.shaft_len;
    let taily = pose.wy - dy * pose.shaft_len;
    if dist_point_segment(px, py, tailx, taily, pose.wx, pose.wy) <= pose.shaft_hw {
        return 1;
    }
    0
}

fn render_sample(r: &mut ChaCha20Rng, style: &SiteStyle, img_size: usize) -> Sample {
    let s = img_size as f32;
    let n = img_size * img_size;
    // Re-pose until every instrument part is visible; the pose ranges make
    // retries rare, the loop is a guard against border clipping. After many
    // misses the jaws widen so the loop always terminates.
    let mut tries = 0usize;
    let pose = loop {
        let mut pose = draw_pose(r, s);
        if tries > 50 {
            pose.jaw_hw *= 1.0 + 0.1 * (tries - 50) as f32;
        }
        tries += 1;
        let mut counts = [0usize; CLASSES];
        for y in 0..img_size {
            for x in 0..img_size {
                counts[classify(&pose, x as f32 + 0.5, y as f32 + 0.5) as usize] += 1;
            }
        }
        if counts[0] > 0 && counts[1] > 0 && counts[2] > 0 && counts[3] > 0 {
            break pose;
        }
    };
    let freq_x = style.texture_freq * (0.7 + 0.6 * r.gen::<f32>()) * std::f32::consts::TAU / s;
    let freq_y = style.texture_freq * (0.7 + 0.6 * r.gen::<f32>()) * std::f32::consts::TAU / s;
    let phase_x = r.gen::<f32>() * std::f32::consts::TAU;
    let phase_y = r.gen::<f32>() * std::f32::consts::TAU;
    let mut image = vec![0.0f32; CHANNELS * n];
    let mut labels = vec![0u8; n];
    for y in 0..img_size {
        for x in 0..img_size {
            let idx = y * img_size + x;
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let class = classify(&pose, fx, fy);
            labels[idx] = class;
            let noise = (r.gen::<f32>() - 0.5) * style.texture_amp;
            let rgb = match class {
                0 => {
                    let wave = (freq_x * fx * 3.0 + phase_x).sin() * (freq_y * fy * 3.0 + phase_y).sin();
                    let t = 0.5 + 0.5 * wave;
                    lerp3(style.base_rgb, style.accent_rgb, t)
                }
                1 => {
                    let d = dist_point_segment(
                        fx,
                        fy,
                        pose.wx - pose.dir.0 * pose.shaft_len,
                        pose.wy - pose.dir.1 * pose.shaft_len,
                        pose.wx,
                        pose.wy,
                    );
                    let shade = 1.0 - 0.45 * (d / pose.shaft_hw);
                    style.instrument_tint.map(|c| c * shade)
                }
                2 => style.instrument_tint.map(|c| c * 0.82),
                _ => style.instrument_tint.map(|c| (c * 1.10).min(1.0)),
            };
            for (ch, &v) in rgb.iter().enumerate() {
                let v = v + noise;
                let v = 0.5 + style.contrast * (v - 0.5) + style.brightness;
                image[ch * n + idx] = v.clamp(0.0, 1.0);
            }
        }
    }
    Sample {
        image,
        mask: Mask::new(CLASSES, img_size, img_size, labels).unwrap(),
    }
}

/// Render `n_samples` images for site `m`, deterministically from
/// `(seed, m)`. Styles differ per site; the shape generator is shared.
pub fn generate_site(
    m: usize,
    n_samples: usize,
    seed: u64,
    img_size: usize,
    style_strength: f32,
) -> SiteDataset {
    let style = site_style(m, style_strength);
    let mut r = rng::stream(seed, &[Purpose::DataTrain as u64, m as u64]);
    let samples = (0..n_samples)
        .map(|_| render_sample(&mut r, &style, img_size))
        .collect();
    SiteDataset {
        site: m,
        img_size,
        style,
        samples,
    }
}

/// Test-split variant of [`generate_site`] (independent stream).
pub fn generate_site_test(
    m: usize,
    n_samples: usize,
    seed: u64,
    img_size: usize,
    style_strength: f32,
) -> SiteDataset {
    let style = site_style(m, style_strength);
    let mut r = rng::stream(seed, &[Purpose::DataTest as u64, m as u64]);
    let samples = (0..n_samples)
        .map(|_| render_sample(&mut r, &style, img_size))
        .collect();
    SiteDataset {
        site: m,
        img_size,
        style,
        samples,
    }
}

/// Per-channel mean and (population) standard deviation over all pixels of
/// all images in the dataset.
pub fn compute_stats(dataset: &SiteDataset) -> Result<StyleStats> {
    if dataset.samples.is_empty() {
        return Err(Error::Empty("compute_stats on empty dataset".into()));
    }
    let n = dataset.img_size * dataset.img_size;
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let count = (dataset.samples.len() * n) as f64;
    for s in &dataset.samples {
        for ch in 0..CHANNELS {
            for &v in &s.image[ch * n..(ch + 1) * n] {
                let v = f64::from(v);
                sum[ch] += v;
                sumsq[ch] += v * v;
            }
        }
    }
    let mut mu = [0.0f32; 3];
    let mut sigma = [0.0f32; 3];
    for ch in 0..CHANNELS {
        let mean = sum[ch] / count;
        let var = (sumsq[ch] / count - mean * mean).max(0.0);
        mu[ch] = mean as f32;
        sigma[ch] = var.sqrt() as f32;
    }
    Ok(StyleStats::new(mu, sigma))
}

/// Convex mixture of the style memory: `beta = sum_i lambda_i mu_i`,
/// `gamma = sum_i lambda_i sigma_i`, per channel.
pub fn mix_style(memory: &StyleMemory, lambdas: &[f64]) -> Result<([f32; 3], [f32; 3])> {
    if lambdas.len() != memory.stats.len() {
        return Err(Error::Lambda(f64::NAN));
    }
    let sum: f64 = lambdas.iter().sum();
    if lambdas.iter().any(|&l| l < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Lambda(sum));
    }
    let mut beta = [0.0f64; 3];
    let mut gamma = [0.0f64; 3];
    for (stats, &l) in memory.stats.iter().zip(lambdas) {
        for ch in 0..CHANNELS {
            beta[ch] += l * f64::from(stats.mu[ch]);
            gamma[ch] += l * f64::from(stats.sigma[ch]);
        }
    }
    Ok((beta.map(|v| v as f32), gamma.map(|v| v as f32)))
}

/// Draw `m` i.i.d. Beta(0.1, 0.1) variates and normalize them to a convex
/// weight vector; an (essentially impossible) all-zero draw is retried.
pub fn sample_lambdas(m: usize, r: &mut ChaCha20Rng) -> Vec<f64> {
    assert!(m >= 1);
    if m == 1 {
        // Consume a draw so stream positions stay aligned with m > 1 uses.
        let _ = r.gen::<f64>();
        return vec![1.0];
    }
    let beta = Beta::new(0.1, 0.1).expect("valid Beta parameters");
    loop {
        let draws: Vec<f64> = (0..m).map(|_| beta.sample(r)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 1e-12 {
            return draws.iter().map(|d| d / sum).collect();
        }
    }
}

/// Affine renormalization of an image from its own statistics toward the
/// mixed target, clamped to [0, 1]:
/// `out = gamma * (I - mu) / sigma + beta`, computed as
/// `I * (gamma/sigma) + (beta - mu * gamma/sigma)` so that distorting a
/// site toward its own statistics is exactly the identity.
pub fn distort(
    image: &[f32],
    own: &StyleStats,
    beta: &[f32; 3],
    gamma: &[f32; 3],
) -> Vec<f32> {
    let n = image.len() / CHANNELS;
    let mut out = vec![0.0f32; image.len()];
    for ch in 0..CHANNELS {
        let scale = gamma[ch] / own.sigma[ch];
        let shift = beta[ch] - own.mu[ch] * scale;
        for i in 0..n {
            out[ch * n + i] = (image[ch * n + i] * scale + shift).clamp(0.0, 1.0);
        }
    }
    out
}
