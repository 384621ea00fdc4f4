//! Client side of the protocol: local training with tag-routed gradients,
//! sensitivity computation, and the upload/download exchange.
//!
//! Per local step the site samples a mini-batch, runs a clean forward for
//! the segmentation and reconstruction losses and (when cross-style
//! consistency is on) a style-distorted forward for the consistency loss.
//! Personalized parameters step along grad(seg + ar), global parameters
//! along grad(seg + csc); the segmentation term feeds both sets, the other
//! two are masked to theirs.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, SiteDataset, StyleMemory, StyleStats};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::SegModel;
use crate::params::{FlatParams, ParamTag};
use crate::rng::{self, Purpose};
use crate::tensor::{backward, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f32,
    pub ar: f32,
    pub csc: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        // The reconstruction and consistency losses are squared-L2 sums
        // over all elements; unit weights at the default 32x32 resolution
        // overwhelm the pixel-mean segmentation loss and diverge within a
        // couple of rounds. The defaults normalize by the element counts of
        // the default configuration (3x32x32 image, 4x32x32 probability
        // map).
        LossWeights {
            seg: 1.0,
            ar: 1.0 / 3072.0,
            csc: 1.0 / 4096.0,
        }
    }
}

/// Whether the style-mixing weights are redrawn per batch or fixed for the
/// round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistortPer {
    #[default]
    Batch,
    Round,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adamw {
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

/// Local optimizer. State (AdamW moments) lives only within a round; it is
/// reset on every download.
struct Optimizer {
    kind: OptimizerKind,
    t: usize,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Optimizer {
    fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn apply(&mut self, name: &str, tensor: &Tensor, grad: &[f32], lr: f32) {
        match self.kind {
            OptimizerKind::Sgd => tensor.apply_step(lr, grad),
            OptimizerKind::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let n = grad.len();
                let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let p = tensor.to_vec();
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let mut eff = vec![0.0f32; n];
                for i in 0..n {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    eff[i] = mhat / (vhat.sqrt() + eps) + weight_decay * p[i];
                }
                tensor.apply_step(lr, &eff);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteTrainConfig {
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weights: LossWeights,
    /// Appearance regulation: adds the reconstruction loss to the
    /// personalized update.
    pub ape: bool,
    /// Cross-style consistency: adds the distorted-forward loss to the
    /// global update and uploads sensitivities.
    pub sge: bool,
    pub distort_per: DistortPer,
    pub sens_cap: usize,
    /// Accumulate raw signed gradients in the sensitivity instead of
    /// absolute values.
    pub sens_signed: bool,
    pub optimizer: OptimizerKind,
}

/// What a site sends to the server after one round of local training.
#[derive(Debug, Clone)]
pub struct SiteUpload {
    pub site: usize,
    pub delta_p: FlatParams,
    pub sens: Option<FlatParams>,
    pub theta_g_after: FlatParams,
    pub theta_p_after: FlatParams,
}

/// Mean per-iteration training losses of the last round.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossMeans {
    pub seg: f64,
    pub ar: f64,
    pub csc: f64,
}

pub struct SiteState {
    pub id: usize,
    pub seed: u64,
    pub round: usize,
    pub model: SegModel,
    pub train: Arc<SiteDataset>,
    pub own_stats: StyleStats,
    pub memory: StyleMemory,
    pub cfg: SiteTrainConfig,
    pub last_losses: LossMeans,
    optimizer: Optimizer,
}

/// `k` distinct indices from `0..n` (all of them, in order, when `k >= n`).
fn choose_batch(r: &mut ChaCha20Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + r.gen_range(0..n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn mean_of(parts: Vec<Tensor>) -> Result<Tensor> {
    let inv = 1.0 / parts.len() as f32;
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for p in it {
        acc = acc.add(&p)?;
    }
    Ok(acc.scale(inv))
}

impl SiteState {
    pub fn new(
        id: usize,
        seed: u64,
        model: SegModel,
        train: Arc<SiteDataset>,
        own_stats: StyleStats,
        memory: StyleMemory,
        cfg: SiteTrainConfig,
    ) -> Self {
        let optimizer = Optimizer::new(cfg.optimizer);
        SiteState {
            id,
            seed,
            round: 0,
            model,
            train,
            own_stats,
            memory,
            cfg,
            last_losses: LossMeans::default(),
            optimizer,
        }
    }

    /// Overwrite both parameter subsets bitwise and reset optimizer state.
    pub fn apply_download(&mut self, theta_g: &FlatParams, theta_p: &FlatParams) -> Result<()> {
        self.model.store.unflatten(ParamTag::Global, theta_g)?;
        self.model.store.unflatten(ParamTag::Personalized, theta_p)?;
        self.optimizer.reset();
        Ok(())
    }

    fn draw_target(&self, r: &mut ChaCha20Rng) -> Result<([f32; 3], [f32; 3])> {
        let lambdas = data::sample_lambdas(self.memory.stats.len(), r);
        data::mix_style(&self.memory, &lambdas)
    }

    /// Run `local_iters` steps of tag-routed SGD and package the upload.
    pub fn local_train(&mut self) -> Result<SiteUpload> {
        let theta_p_before = self.model.store.flatten(ParamTag::Personalized);
        let has_personalized = !theta_p_before.entries.is_empty();
        let n = self.train.samples.len();
        let img_size = self.train.img_size;
        let w = self.cfg.weights;
        let mut batch_rng = rng::site_round_stream(self.seed, Purpose::Batch, self.id, self.round);
        let mut lambda_rng =
            rng::site_round_stream(self.seed, Purpose::Lambda, self.id, self.round);
        let round_target = if self.cfg.sge && self.cfg.distort_per == DistortPer::Round {
            Some(self.draw_target(&mut lambda_rng)?)
        } else {
            None
        };
        let mut sums = LossMeans::default();
        for step in 0..self.cfg.local_iters {
            let idxs = choose_batch(&mut batch_rng, n, self.cfg.batch_size);
            let target = if self.cfg.sge {
                match self.cfg.distort_per {
                    DistortPer::Batch => Some(self.draw_target(&mut lambda_rng)?),
                    DistortPer::Round => round_target,
                }
            } else {
                None
            };
            let mut seg_parts = Vec::with_capacity(idxs.len());
            let mut ar_parts = Vec::with_capacity(idxs.len());
            let mut csc_parts = Vec::with_capacity(idxs.len());
            for &i in &idxs {
                let sample = &self.train.samples[i];
                let img = sample.image_tensor(img_size);
                let out = self.model.forward(&img)?;
                seg_parts.push(losses::seg_loss(&out.logits, &sample.mask)?);
                if self.cfg.ape {
                    ar_parts.push(losses::ar_loss(&out.recon, &img)?);
                }
                if let Some((beta, gamma)) = &target {
                    let distorted = data::distort(&sample.image, &self.own_stats, beta, gamma);
                    let dimg =
                        Tensor::from_vec(img.shape().to_vec(), distorted, false)?;
                    let dout = self.model.forward(&dimg)?;
                    csc_parts.push(losses::csc_loss(&dout.logits, &sample.mask)?);
                }
            }
            let l_seg = mean_of(seg_parts)?;
            let l_ar = if ar_parts.is_empty() {
                None
            } else {
                Some(mean_of(ar_parts)?)
            };
            let l_csc = if csc_parts.is_empty() {
                None
            } else {
                Some(mean_of(csc_parts)?)
            };
            let diverged = |v: f32| !v.is_finite();
            let (seg_v, ar_v, csc_v) = (
                l_seg.item(),
                l_ar.as_ref().map_or(0.0, Tensor::item),
                l_csc.as_ref().map_or(0.0, Tensor::item),
            );
            if diverged(seg_v) || diverged(ar_v) || diverged(csc_v) {
                return Err(Error::Diverged {
                    site: self.id,
                    round: self.round,
                    step,
                });
            }
            sums.seg += f64::from(seg_v);
            sums.ar += f64::from(ar_v);
            sums.csc += f64::from(csc_v);
            self.optimizer.begin_step();
            // Three minimal backward passes; the per-tag updates are then
            // the weighted sums grad(w_seg*seg + w_ar*ar) for personalized
            // and grad(w_seg*seg + w_csc*csc) for global parameters.
            self.model.store.zero_grads();
            backward(&l_seg.scale(w.seg))?;
            let seg_p = self.model.store.grads(ParamTag::Personalized);
            let seg_g = self.model.store.grads(ParamTag::Global);
            let ar_p = match &l_ar {
                Some(ar) if has_personalized => {
                    self.model.store.zero_grads();
                    backward(&ar.scale(w.ar))?;
                    Some(self.model.store.grads(ParamTag::Personalized))
                }
                _ => None,
            };
            let csc_g = match &l_csc {
                Some(csc) => {
                    self.model.store.zero_grads();
                    backward(&csc.scale(w.csc))?;
                    Some(self.model.store.grads(ParamTag::Global))
                }
                None => None,
            };
            if has_personalized {
                for (i, e) in self.model.store.iter_tagged(ParamTag::Personalized).enumerate() {
                    let base = &seg_p.entries[i].1;
                    match &ar_p {
                        Some(ar) => {
                            let extra = &ar.entries[i].1;
                            let eff: Vec<f32> =
                                base.iter().zip(extra).map(|(a, b)| a + b).collect();
                            self.optimizer.apply(&e.name, &e.tensor, &eff, self.cfg.lr);
                        }
                        None => self.optimizer.apply(&e.name, &e.tensor, base, self.cfg.lr),
                    }
                }
            }
            for (i, e) in self.model.store.iter_tagged(ParamTag::Global).enumerate() {
                let base = &seg_g.entries[i].1;
                match &csc_g {
                    Some(csc) => {
                        let extra = &csc.entries[i].1;
                        let eff: Vec<f32> = base.iter().zip(extra).map(|(a, b)| a + b).collect();
                        self.optimizer.apply(&e.name, &e.tensor, &eff, self.cfg.lr);
                    }
                    None => self.optimizer.apply(&e.name, &e.tensor, base, self.cfg.lr),
                }
            }
        }
        self.model.store.zero_grads();
        let iters = self.cfg.local_iters.max(1) as f64;
        self.last_losses = LossMeans {
            seg: sums.seg / iters,
            ar: sums.ar / iters,
            csc: sums.csc / iters,
        };
        let theta_p_after = self.model.store.flatten(ParamTag::Personalized);
        let theta_g_after = self.model.store.flatten(ParamTag::Global);
        let delta_p = theta_p_after.sub(&theta_p_before)?;
        let sens = if self.cfg.sge {
            Some(self.sensitivity()?)
        } else {
            None
        };
        let upload = SiteUpload {
            site: self.id,
            delta_p,
            sens,
            theta_g_after,
            theta_p_after,
        };
        let finite = upload.delta_p.is_finite()
            && upload.theta_g_after.is_finite()
            && upload.theta_p_after.is_finite()
            && upload.sens.as_ref().map_or(true, FlatParams::is_finite);
        if !finite {
            return Err(Error::Diverged {
                site: self.id,
                round: self.round,
                step: self.cfg.local_iters,
            });
        }
        Ok(upload)
    }

    /// Mean (absolute, unless `sens_signed`) gradient of the squared L2 norm
    /// of the segmentation logits, per global parameter, over the first
    /// `sens_cap` training images.
    pub fn sensitivity(&self) -> Result<FlatParams> {
        let n_imgs = self.train.samples.len().min(self.cfg.sens_cap).max(1);
        let layout = self.model.store.flatten(ParamTag::Global);
        let mut acc: Vec<Vec<f64>> = layout
            .entries
            .iter()
            .map(|(_, v)| vec![0.0; v.len()])
            .collect();
        for sample in self.train.samples.iter().take(n_imgs) {
            let img = sample.image_tensor(self.train.img_size);
            let out = self.model.forward(&img)?;
            let s = out.logits.sq_l2_norm();
            self.model.store.zero_grads();
            backward(&s)?;
            let grads = self.model.store.grads(ParamTag::Global);
            for (a, (_, g)) in acc.iter_mut().zip(&grads.entries) {
                if self.cfg.sens_signed {
                    for (av, &gv) in a.iter_mut().zip(g) {
                        *av += f64::from(gv);
                    }
                } else {
                    for (av, &gv) in a.iter_mut().zip(g) {
                        *av += f64::from(gv).abs();
                    }
                }
            }
        }
        self.model.store.zero_grads();
        let inv = 1.0 / n_imgs as f64;
        Ok(FlatParams {
            entries: layout
                .entries
                .iter()
                .zip(acc)
                .map(|((name, _), a)| {
                    (
                        name.clone(),
                        a.iter().map(|&v| (v * inv) as f32).collect(),
                    )
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_site;
    use crate::model::ModelConfig;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            img_size: 16,
            embed_dim: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_channels: 4,
            num_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn cfg(lr: f32) -> SiteTrainConfig {
        SiteTrainConfig {
            local_iters: 2,
            batch_size: 2,
            lr,
            weights: LossWeights::default(),
            ape: true,
            sge: true,
            distort_per: DistortPer::Batch,
            sens_cap: 4,
            sens_signed: false,
            optimizer: OptimizerKind::Sgd,
        }
    }

    fn make_site(lr: f32, seed: u64) -> SiteState {
        let mut r = rng::stream(seed, &[50]);
        let model = SegModel::new(tiny_model_config(), &mut r, true).unwrap();
        let train = Arc::new(generate_site(0, 6, seed, 16, 1.0));
        let stats = data::compute_stats(&train).unwrap();
        let memory = StyleMemory {
            stats: vec![
                stats,
                StyleStats::new([0.2, 0.3, 0.4], [0.05, 0.06, 0.07]),
                StyleStats::new([0.6, 0.5, 0.4], [0.09, 0.08, 0.07]),
            ],
        };
        SiteState::new(0, seed, model, train, stats, memory, cfg(lr))
    }

    #[test]
    fn zero_lr_round_is_a_no_op() {
        let mut site = make_site(0.0, 21);
        let g0 = site.model.store.flatten(ParamTag::Global);
        let p0 = site.model.store.flatten(ParamTag::Personalized);
        let up = site.local_train().unwrap();
        assert!(up.delta_p.entries.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
        assert_eq!(up.theta_g_after, g0);
        assert_eq!(up.theta_p_after, p0);
    }

    #[test]
    fn download_then_upload_roundtrips_bitwise() {
        let mut site = make_site(0.0, 22);
        let mut other = make_site(0.0, 23);
        let g = other.model.store.flatten(ParamTag::Global);
        let p = other.model.store.flatten(ParamTag::Personalized);
        site.apply_download(&g, &p).unwrap();
        let up = site.local_train().unwrap();
        assert_eq!(up.theta_g_after, g);
        assert_eq!(up.theta_p_after, p);
        // Downloading one's own upload is a fixed point.
        site.apply_download(&up.theta_g_after, &up.theta_p_after).unwrap();
        assert_eq!(site.model.store.flatten(ParamTag::Global), g);
        let _ = other;
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let mut site = make_site(0.0, 24);
        let mut g = site.model.store.flatten(ParamTag::Global);
        g.entries[0].0 = "not-a-layer".into();
        let p = site.model.store.flatten(ParamTag::Personalized);
        assert!(matches!(
            site.apply_download(&g, &p).unwrap_err(),
            Error::Layout(_)
        ));
    }

    #[test]
    fn one_step_sgd_matches_manual_backward() {
        // local_iters = 1 with a full batch: delta_p must equal -lr * grad
        // of (seg + ar) accumulated by a single manual backward.
        let seed = 31;
        let lr = 1e-2;
        let mut site = make_site(lr, seed);
        site.cfg.local_iters = 1;
        site.cfg.batch_size = site.train.samples.len();
        site.cfg.sge = false; // keep the personalized comparison clean
        site.cfg.weights = LossWeights {
            seg: 1.0,
            ar: 1.0,
            csc: 1.0,
        };
        let reference = {
            let mut r = rng::stream(seed, &[50]);
            let m = SegModel::new(tiny_model_config(), &mut r, true).unwrap();
            m
        };
        reference
            .store
            .unflatten(ParamTag::Global, &site.model.store.flatten(ParamTag::Global))
            .unwrap();
        reference
            .store
            .unflatten(
                ParamTag::Personalized,
                &site.model.store.flatten(ParamTag::Personalized),
            )
            .unwrap();
        let up = site.local_train().unwrap();
        // Manual single backward over the same full batch.
        let mut seg_parts = Vec::new();
        let mut ar_parts = Vec::new();
        for sample in &site.train.samples {
            let img = sample.image_tensor(site.train.img_size);
            let out = reference.forward(&img).unwrap();
            seg_parts.push(losses::seg_loss(&out.logits, &sample.mask).unwrap());
            ar_parts.push(losses::ar_loss(&out.recon, &img).unwrap());
        }
        let root = mean_of(seg_parts)
            .unwrap()
            .scale(1.0)
            .add(&mean_of(ar_parts).unwrap().scale(1.0))
            .unwrap();
        reference.store.zero_grads();
        backward(&root).unwrap();
        let grads = reference.store.grads(ParamTag::Personalized);
        let theta = reference.store.flatten(ParamTag::Personalized);
        for (((name, d), (_, g)), (_, th)) in up
            .delta_p
            .entries
            .iter()
            .zip(&grads.entries)
            .zip(&theta.entries)
        {
            for ((dv, gv), tv) in d.iter().zip(g).zip(th) {
                // delta = fl(theta - lr*(g_seg + g_ar)) - theta: allow one
                // rounding quantum of theta plus a few ulp of the update
                // itself (the site sums the two loss gradients in f32).
                let tol = f32::EPSILON * (tv.abs() + 8.0 * (lr * gv).abs()) + 1e-11;
                let err = (dv - (-lr * gv)).abs();
                assert!(err <= tol, "mismatch in {name}: {dv} vs {} (tol {tol})", -lr * gv);
            }
        }
    }

    #[test]
    fn gradient_routing_is_masked_to_loss_sets() {
        // Changing the csc weight must not change personalized updates;
        // changing the ar weight must not change global updates.
        let run = |w_ar: f32, w_csc: f32| {
            let mut site = make_site(5e-3, 41);
            site.cfg.local_iters = 1;
            site.cfg.weights = LossWeights {
                seg: 1.0,
                ar: w_ar,
                csc: w_csc,
            };
            site.local_train().unwrap()
        };
        let base = run(1.0, 1.0);
        let csc_changed = run(1.0, 3.0);
        let ar_changed = run(3.0, 1.0);
        assert_eq!(base.theta_p_after, csc_changed.theta_p_after);
        assert_eq!(base.theta_g_after, ar_changed.theta_g_after);
        assert_ne!(base.theta_g_after, csc_changed.theta_g_after);
        assert_ne!(base.theta_p_after, ar_changed.theta_p_after);
    }

    #[test]
    fn sensitivity_is_nonnegative_and_count_invariant() {
        let mut site = make_site(5e-3, 51);
        let up = site.local_train().unwrap();
        let sens = up.sens.unwrap();
        assert!(sens
            .entries
            .iter()
            .all(|(_, v)| v.iter().all(|&x| x >= 0.0)));
        // Duplicating the dataset leaves the mean unchanged.
        let doubled: Vec<crate::data::Sample> = site
            .train
            .samples
            .iter()
            .flat_map(|s| [s.clone(), s.clone()])
            .collect();
        let mut site2 = make_site(5e-3, 51);
        site2
            .apply_download(
                &site.model.store.flatten(ParamTag::Global),
                &site.model.store.flatten(ParamTag::Personalized),
            )
            .unwrap();
        site2.train = Arc::new(SiteDataset {
            site: 0,
            img_size: site.train.img_size,
            style: site.train.style.clone(),
            samples: doubled,
        });
        site2.cfg.sens_cap = 2 * site.cfg.sens_cap;
        let s2 = site2.sensitivity().unwrap();
        let s1 = site.sensitivity().unwrap();
        assert!(s1.max_abs_diff(&s2) < 1e-9);
    }

    #[test]
    fn zeroed_segmentation_head_zeroes_sensitivity() {
        let site = make_site(5e-3, 61);
        for name in ["seg.w", "seg.b"] {
            let e = site.model.store.get(name).unwrap();
            e.tensor.set_data(&vec![0.0; e.tensor.numel()]);
        }
        let sens = site.sensitivity().unwrap();
        assert!(sens
            .entries
            .iter()
            .all(|(_, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn delta_layout_is_stable_across_rounds() {
        let mut site = make_site(5e-3, 71);
        let up1 = site.local_train().unwrap();
        site.round += 1;
        let up2 = site.local_train().unwrap();
        assert!(up1.delta_p.layout_matches(&up2.delta_p));
        let names: Vec<&str> = up1.delta_p.entries.iter().map(|(n, _)| n.as_str()).collect();
        let names2: Vec<&str> = up2.delta_p.entries.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, names2);
    }

    #[test]
    fn adamw_single_step_matches_formula() {
        let mut opt = Optimizer::new(OptimizerKind::Adamw {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        });
        let p = Tensor::from_vec(vec![1], vec![2.0], true).unwrap();
        let g = [0.5f32];
        opt.begin_step();
        opt.apply("p", &p, &g, 0.1);
        // t=1: mhat = g, vhat = g^2, step = g/|g| + wd*p = 1/(1+eps') + 0.02.
        let mhat = 0.5f32;
        let vhat = 0.25f32;
        let expect = 2.0 - 0.1 * (mhat / (vhat.sqrt() + 1e-8) + 0.01 * 2.0);
        assert!((p.to_vec()[0] - expect).abs() < 1e-6);
    }
}
