//! Server side of the protocol.
//!
//! Personalized parameters are re-mixed per site through that site's
//! hypernetwork: a learnable embedding through a small MLP emits one
//! convex weight row per personalized layer, and the hypernetwork itself
//! is trained from the site's uploaded parameter delta through the chain
//! rule (the gradient of the surrogate `<theta_p(omega), delta>` equals
//! the layer-wise product of uploads and delta). Global parameters are
//! mixed per scalar by a softmax over the sites' uploaded sensitivities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::FlatParams;
use crate::rng::{self, Purpose};
use crate::site::SiteUpload;
use crate::tensor::{backward, Tensor};

#[derive(Debug, Clone)]
pub struct HnConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub lr: f32,
}

impl Default for HnConfig {
    fn default() -> Self {
        HnConfig {
            embed_dim: 8,
            hidden: 32,
            lr: 1e-2,
        }
    }
}

/// Per-layer, per-site convex mixing weights: `rows[l][i]` is the weight of
/// site `i`'s upload for layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMatrix {
    pub layers: Vec<String>,
    pub sites: usize,
    pub rows: Vec<Vec<f32>>,
}

impl AggregationMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.layers.len() {
            return Err(Error::Layout("aggregation rows vs layers".into()));
        }
        for (l, row) in self.layers.iter().zip(&self.rows) {
            if row.len() != self.sites {
                return Err(Error::Layout(format!("row {l} has {} entries", row.len())));
            }
            let sum: f32 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Layout(format!(
                    "row {l} is not convex (sum {sum})"
                )));
            }
        }
        Ok(())
    }
}

/// One site's hypernetwork: embedding -> hidden tanh layer -> linear logits,
/// reshaped to one row per personalized layer and row-softmaxed. The output
/// layer starts at zero so the initial matrix is uniform.
pub struct Hypernetwork {
    pub site: usize,
    pub layers: Vec<String>,
    pub sites: usize,
    nu: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Hypernetwork {
    pub fn new(site: usize, sites: usize, layers: Vec<String>, cfg: &HnConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[Purpose::HypernetInit as u64, site as u64]);
        let d = cfg.embed_dim;
        let h = cfg.hidden;
        let out = layers.len() * sites;
        let unif = |r: &mut rand_chacha::ChaCha20Rng, n: usize, a: f32| -> Vec<f32> {
            (0..n).map(|_| r.gen::<f32>() * 2.0 * a - a).collect()
        };
        let nu = Tensor::from_vec(vec![1, d], unif(&mut r, d, 1.0), true).unwrap();
        let w1 = Tensor::from_vec(vec![d, h], unif(&mut r, d * h, 1.0 / (d as f32).sqrt()), true)
            .unwrap();
        let b1 = Tensor::zeros(vec![h], true);
        let w2 = Tensor::zeros(vec![h, out], true);
        let b2 = Tensor::zeros(vec![out], true);
        Hypernetwork {
            site,
            layers,
            sites,
            nu,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn omega_graph(&self) -> Result<Tensor> {
        let hidden = self
            .nu
            .matmul(&self.w1)?
            .add_row_bias(&self.b1)?
            .tanh();
        let logits = hidden.matmul(&self.w2)?.add_row_bias(&self.b2)?;
        logits
            .reshape(vec![self.layers.len(), self.sites])?
            .softmax(1)
    }

    /// Deterministic forward pass: the current aggregation matrix.
    pub fn forward(&self) -> Result<AggregationMatrix> {
        let omega = self.omega_graph()?;
        let data = omega.to_vec();
        let rows = data
            .chunks(self.sites)
            .map(|c| c.to_vec())
            .collect();
        Ok(AggregationMatrix {
            layers: self.layers.clone(),
            sites: self.sites,
            rows,
        })
    }

    fn params(&self) -> [&Tensor; 5] {
        [&self.nu, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Update embedding and MLP weights from the site's uploaded delta.
    ///
    /// The surrogate `S = sum_l <sum_i omega_{l,i} theta_p^{l,i}, delta^l>`
    /// collapses to `sum_{l,i} omega_{l,i} c_{l,i}` with constant
    /// `c_{l,i} = <theta_p^{l,i}, delta^l>`, so reverse-mode through the
    /// hypernetwork alone yields exactly the chain-rule product of uploads
    /// and delta. The parameters step UP the surrogate: the mixed
    /// `theta_p(omega)` moves along the direction local training moved,
    /// which in practice up-weights sites whose uploads align with the
    /// site's own update.
    pub fn update(&mut self, all_p: &[FlatParams], delta_p: &FlatParams, lr: f32) -> Result<()> {
        let n_layers = self.layers.len();
        if n_layers == 0 {
            return Ok(());
        }
        let mut consts = vec![0.0f32; n_layers * self.sites];
        for (l, (lname, dvals)) in delta_p.entries.iter().enumerate() {
            if lname != &self.layers[l] {
                return Err(Error::Layout(format!(
                    "delta layer {lname} does not match hypernetwork layer {}",
                    self.layers[l]
                )));
            }
            for (i, up) in all_p.iter().enumerate() {
                let (uname, uvals) = &up.entries[l];
                if uname != lname || uvals.len() != dvals.len() {
                    return Err(Error::Layout(format!("upload layer {uname} vs {lname}")));
                }
                let dot: f64 = uvals
                    .iter()
                    .zip(dvals)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                consts[l * self.sites + i] = dot as f32;
            }
        }
        let c = Tensor::from_vec(vec![n_layers, self.sites], consts, false)?;
        let omega = self.omega_graph()?;
        let surrogate = omega.mul(&c)?.sum_all();
        for p in self.params() {
            p.zero_grad();
        }
        backward(&surrogate)?;
        for p in self.params() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::HnDiverged(self.site));
                }
                p.apply_step(-lr, &g);
            }
            p.zero_grad();
        }
        Ok(())
    }

    /// Gradients of the surrogate w.r.t. every hypernetwork parameter,
    /// without applying a step (the oracle hook for the chain-rule identity
    /// tests). Names follow [`Hypernetwork::param_values`].
    pub fn surrogate_gradients(
        &self,
        all_p: &[FlatParams],
        delta_p: &FlatParams,
    ) -> Result<Vec<(&'static str, Vec<f32>)>> {
        let n_layers = self.layers.len();
        let mut consts = vec![0.0f32; n_layers * self.sites];
        for (l, (_, dvals)) in delta_p.entries.iter().enumerate() {
            for (i, up) in all_p.iter().enumerate() {
                let dot: f64 = up.entries[l]
                    .1
                    .iter()
                    .zip(dvals)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                consts[l * self.sites + i] = dot as f32;
            }
        }
        let c = Tensor::from_vec(vec![n_layers, self.sites], consts, false)?;
        let omega = self.omega_graph()?;
        let surrogate = omega.mul(&c)?.sum_all();
        for p in self.params() {
            p.zero_grad();
        }
        backward(&surrogate)?;
        let out = PARAM_NAMES
            .iter()
            .zip(self.params())
            .map(|(&n, p)| (n, p.grad().unwrap_or_else(|| vec![0.0; p.numel()])))
            .collect();
        for p in self.params() {
            p.zero_grad();
        }
        Ok(out)
    }

    /// Gradient of the surrogate w.r.t. the embedding alone.
    pub fn embedding_gradient(&self, all_p: &[FlatParams], delta_p: &FlatParams) -> Result<Vec<f32>> {
        Ok(self.surrogate_gradients(all_p, delta_p)?.remove(0).1)
    }

    /// Bitwise snapshot of the embedding (test hook).
    pub fn embedding(&self) -> Vec<f32> {
        self.nu.to_vec()
    }

    pub fn set_embedding(&mut self, v: &[f32]) {
        self.nu.set_data(v);
    }

    /// Raw parameter values in `PARAM_NAMES` order.
    pub fn param_values(&self) -> Vec<(&'static str, Vec<f32>)> {
        PARAM_NAMES
            .iter()
            .zip(self.params())
            .map(|(&n, p)| (n, p.to_vec()))
            .collect()
    }

    pub fn set_param_values(&mut self, name: &str, values: &[f32]) {
        let idx = PARAM_NAMES.iter().position(|&n| n == name).expect("hn param name");
        self.params()[idx].set_data(values);
    }
}

pub const PARAM_NAMES: [&str; 5] = ["nu", "w1", "b1", "w2", "b2"];

/// `theta_p` for site `m`: per layer, the omega-weighted sum of all sites'
/// uploads.
pub fn personalize(
    all_p: &[FlatParams],
    omega: &AggregationMatrix,
    m: usize,
) -> Result<FlatParams> {
    if all_p.len() != omega.sites {
        return Err(Error::IncompleteRound(all_p.len()));
    }
    let first = &all_p[0];
    for up in all_p.iter().skip(1) {
        first.check_layout(up)?;
    }
    if first.entries.len() != omega.layers.len() {
        return Err(Error::Layout(format!(
            "{} upload layers vs {} omega rows",
            first.entries.len(),
            omega.layers.len()
        )));
    }
    let _ = m;
    let mut out = Vec::with_capacity(first.entries.len());
    for (l, (name, base)) in first.entries.iter().enumerate() {
        if name != &omega.layers[l] {
            return Err(Error::Layout(format!(
                "upload layer {name} vs omega row {}",
                omega.layers[l]
            )));
        }
        let row = &omega.rows[l];
        let mut acc = vec![0.0f64; base.len()];
        for (i, up) in all_p.iter().enumerate() {
            let wi = f64::from(row[i]);
            for (a, &v) in acc.iter_mut().zip(&up.entries[l].1) {
                *a += wi * f64::from(v);
            }
        }
        out.push((name.clone(), acc.iter().map(|&v| v as f32).collect()));
    }
    Ok(FlatParams { entries: out })
}

/// Sensitivity-softmax mixing of global parameters: per scalar, weights are
/// `softmax_i(sens_i / temperature)` and the output is the weighted sum of
/// the sites' values.
pub fn sge_aggregate(
    all_g: &[FlatParams],
    all_sens: &[FlatParams],
    temperature: f32,
) -> Result<FlatParams> {
    if all_g.is_empty() || all_g.len() != all_sens.len() {
        return Err(Error::IncompleteRound(all_g.len()));
    }
    let first = &all_g[0];
    for other in all_g.iter().skip(1) {
        first.check_layout(other)?;
    }
    for s in all_sens {
        first.check_layout(s)?;
    }
    let t = f64::from(temperature);
    let m = all_g.len();
    let mut out = Vec::with_capacity(first.entries.len());
    for (l, (name, base)) in first.entries.iter().enumerate() {
        let mut vals = vec![0.0f32; base.len()];
        for p in 0..base.len() {
            let mut mx = f64::NEG_INFINITY;
            for s in all_sens {
                mx = mx.max(f64::from(s.entries[l].1[p]) / t);
            }
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..m {
                let e = (f64::from(all_sens[i].entries[l].1[p]) / t - mx).exp();
                num += e * f64::from(all_g[i].entries[l].1[p]);
                den += e;
            }
            vals[p] = (num / den) as f32;
        }
        out.push((name.clone(), vals));
    }
    Ok(FlatParams { entries: out })
}

/// Plain count-weighted averaging over all given parameters.
pub fn fedavg_aggregate(all: &[FlatParams], counts: &[usize]) -> Result<FlatParams> {
    if all.is_empty() || all.len() != counts.len() {
        return Err(Error::IncompleteRound(all.len()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("fedavg with zero total count".into()));
    }
    let first = &all[0];
    for other in all.iter().skip(1) {
        first.check_layout(other)?;
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut out = Vec::with_capacity(first.entries.len());
    for (l, (name, base)) in first.entries.iter().enumerate() {
        let mut acc = vec![0.0f64; base.len()];
        for (i, up) in all.iter().enumerate() {
            let w = weights[i];
            for (a, &v) in acc.iter_mut().zip(&up.entries[l].1) {
                *a += w * f64::from(v);
            }
        }
        out.push((name.clone(), acc.iter().map(|&v| v as f32).collect()));
    }
    Ok(FlatParams { entries: out })
}

/// How the server combines uploads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerMode {
    /// Hypernetwork personalization (when `ape`) + sensitivity-softmax
    /// global mixing (when `sge`, count-weighted averaging otherwise).
    PfedSis { ape: bool, sge: bool },
    /// Count-weighted averaging of everything; personalization machinery
    /// bypassed entirely.
    FedAvg,
}

pub struct ServerConfig {
    pub mode: ServerMode,
    pub hn: HnConfig,
    pub sge_temperature: f32,
}

pub struct ServerState {
    pub round: usize,
    pub theta_g: FlatParams,
    pub theta_p: Vec<FlatParams>,
    pub counts: Vec<usize>,
    pub cfg: ServerConfig,
    hns: Vec<Hypernetwork>,
}

/// Per-site download after a server round.
#[derive(Debug, Clone)]
pub struct Download {
    pub theta_g: FlatParams,
    pub theta_p: FlatParams,
}

pub struct RoundResult {
    pub downloads: Vec<Download>,
    /// Post-update aggregation matrices, one per site, when hypernetwork
    /// personalization ran this round.
    pub omegas: Option<Vec<AggregationMatrix>>,
}

impl ServerState {
    pub fn new(
        seed: u64,
        sites: usize,
        theta_g: FlatParams,
        theta_p_init: FlatParams,
        counts: Vec<usize>,
        cfg: ServerConfig,
    ) -> Self {
        let layer_names: Vec<String> = theta_p_init
            .entries
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let use_hn = matches!(cfg.mode, ServerMode::PfedSis { ape: true, .. })
            && !layer_names.is_empty();
        let hns = if use_hn {
            (0..sites)
                .map(|m| Hypernetwork::new(m, sites, layer_names.clone(), &cfg.hn, seed))
                .collect()
        } else {
            Vec::new()
        };
        ServerState {
            round: 0,
            theta_g,
            theta_p: vec![theta_p_init; sites],
            counts,
            cfg,
            hns,
        }
    }

    pub fn sites(&self) -> usize {
        self.theta_p.len()
    }

    pub fn download_for(&self, m: usize) -> Download {
        Download {
            theta_g: self.theta_g.clone(),
            theta_p: self.theta_p[m].clone(),
        }
    }

    pub fn hypernetwork(&self, m: usize) -> Option<&Hypernetwork> {
        self.hns.get(m)
    }

    pub fn hypernetwork_mut(&mut self, m: usize) -> Option<&mut Hypernetwork> {
        self.hns.get_mut(m)
    }

    /// One aggregation round over exactly one upload per site, in site
    /// order. Per site: hypernetwork update, then forward, then
    /// personalization; afterwards one shared global aggregation.
    pub fn run_round(&mut self, uploads: &[SiteUpload]) -> Result<RoundResult> {
        let m_sites = self.sites();
        if uploads.len() != m_sites {
            return Err(Error::IncompleteRound(uploads.len()));
        }
        for (i, up) in uploads.iter().enumerate() {
            if up.site != i {
                return Err(Error::IncompleteRound(i));
            }
        }
        let all_g: Vec<FlatParams> = uploads.iter().map(|u| u.theta_g_after.clone()).collect();
        let result = match self.cfg.mode {
            ServerMode::FedAvg => {
                self.theta_g = fedavg_aggregate(&all_g, &self.counts)?;
                for (slot, up) in self.theta_p.iter_mut().zip(uploads) {
                    *slot = up.theta_p_after.clone();
                }
                RoundResult {
                    downloads: (0..m_sites).map(|m| self.download_for(m)).collect(),
                    omegas: None,
                }
            }
            ServerMode::PfedSis { ape, sge } => {
                let all_p: Vec<FlatParams> =
                    uploads.iter().map(|u| u.theta_p_after.clone()).collect();
                let omegas = if ape && !self.hns.is_empty() {
                    let mut mats = Vec::with_capacity(m_sites);
                    for m in 0..m_sites {
                        let lr = self.cfg.hn.lr;
                        self.hns[m].update(&all_p, &uploads[m].delta_p, lr)?;
                        let omega = self.hns[m].forward()?;
                        omega.validate()?;
                        self.theta_p[m] = personalize(&all_p, &omega, m)?;
                        mats.push(omega);
                    }
                    Some(mats)
                } else {
                    for (slot, up) in self.theta_p.iter_mut().zip(uploads) {
                        *slot = up.theta_p_after.clone();
                    }
                    None
                };
                if sge {
                    let all_sens: Vec<FlatParams> = uploads
                        .iter()
                        .map(|u| {
                            u.sens
                                .clone()
                                .ok_or(Error::IncompleteRound(u.site))
                        })
                        .collect::<Result<_>>()?;
                    self.theta_g =
                        sge_aggregate(&all_g, &all_sens, self.cfg.sge_temperature)?;
                } else {
                    self.theta_g = fedavg_aggregate(&all_g, &self.counts)?;
                }
                RoundResult {
                    downloads: (0..m_sites).map(|m| self.download_for(m)).collect(),
                    omegas,
                }
            }
        };
        self.round += 1;
        Ok(result)
    }
}
