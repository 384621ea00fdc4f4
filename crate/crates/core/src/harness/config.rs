use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::server::{HnConfig, ServerMode};
use crate::site::{DistortPer, LossWeights, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pfedsis,
    Fedavg,
    Local,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Pfedsis => "pfedsis",
            Mode::Fedavg => "fedavg",
            Mode::Local => "local",
        }
    }
}

/// Component switches (pfedsis mode only). `gpd` controls the parameter
/// split, `ape` the appearance-regulation loss + hypernetwork aggregation,
/// `sge` the cross-style consistency loss + sensitivity aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub gpd: bool,
    pub ape: bool,
    pub sge: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            gpd: true,
            ape: true,
            sge: true,
        }
    }
}

impl Components {
    pub const OFF: Components = Components {
        gpd: false,
        ape: false,
        sge: false,
    };
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Only meaningful (and only accepted) for mode = pfedsis; absent means
    /// all components on.
    pub components: Option<Components>,
    pub sites: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub hn_lr: f32,
    pub hn_embed_dim: usize,
    pub hn_hidden: usize,
    pub sge_temperature: f32,
    pub sens_cap: usize,
    pub sens_signed: bool,
    pub distort_per: DistortPer,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerKind,
    pub seeds: Vec<u64>,
    pub eval_interval: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub trace: bool,
    pub sequential: bool,
    /// Provenance note copied into the resolved config.
    pub scale_note: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Pfedsis,
            components: None,
            sites: 3,
            rounds: 40,
            local_iters: 20,
            batch_size: 8,
            lr: 5e-3,
            hn_lr: 1e-2,
            hn_embed_dim: 8,
            hn_hidden: 32,
            sge_temperature: 1.0,
            sens_cap: 64,
            sens_signed: false,
            distort_per: DistortPer::Batch,
            loss_weights: LossWeights::default(),
            optimizer: OptimizerKind::Sgd,
            seeds: vec![1, 2, 3],
            eval_interval: 5,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            trace: false,
            sequential: false,
            scale_note: "desk-scale defaults; reference protocol scale is rounds=200, local_iters=100"
                .into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.data.validate(self.sites)?;
        if self.model.img_size != self.data.img_size {
            return err(format!(
                "model img_size {} != data img_size {}",
                self.model.img_size, self.data.img_size
            ));
        }
        if self.sites == 0 || self.rounds == 0 || self.local_iters == 0 || self.batch_size == 0 {
            return err("sites, rounds, local_iters and batch_size must be positive".into());
        }
        if self.eval_interval == 0 {
            return err("eval_interval must be positive".into());
        }
        if self.seeds.is_empty() {
            return err("at least one seed required".into());
        }
        if self.mode != Mode::Pfedsis && self.components.is_some() {
            return err("component switches are pfedsis-only".into());
        }
        let flags = self.flags();
        if flags.ape && !flags.gpd {
            return err("ape requires gpd (there is no personalized subset without it)".into());
        }
        let w = self.loss_weights;
        if !(w.seg.is_finite() && w.ar.is_finite() && w.csc.is_finite())
            || w.seg < 0.0
            || w.ar < 0.0
            || w.csc < 0.0
        {
            return err("loss weights must be finite and nonnegative".into());
        }
        if !self.lr.is_finite() || !self.hn_lr.is_finite() {
            return err("learning rates must be finite".into());
        }
        if !(self.sge_temperature.is_finite() && self.sge_temperature > 0.0) {
            return err("sge_temperature must be positive".into());
        }
        if self.hn_embed_dim == 0 || self.hn_hidden == 0 || self.sens_cap == 0 {
            return err("hn_embed_dim, hn_hidden and sens_cap must be positive".into());
        }
        Ok(())
    }

    /// Effective component switches: pfedsis resolves its option, the
    /// baselines run with everything off.
    pub fn flags(&self) -> Components {
        match self.mode {
            Mode::Pfedsis => self.components.unwrap_or_default(),
            Mode::Fedavg | Mode::Local => Components::OFF,
        }
    }

    /// Server aggregation mode; `None` for local training.
    pub fn server_mode(&self) -> Option<ServerMode> {
        match self.mode {
            Mode::Pfedsis => {
                let f = self.flags();
                Some(ServerMode::PfedSis {
                    ape: f.ape,
                    sge: f.sge,
                })
            }
            Mode::Fedavg => Some(ServerMode::FedAvg),
            Mode::Local => None,
        }
    }

    pub fn hn_config(&self) -> HnConfig {
        HnConfig {
            embed_dim: self.hn_embed_dim,
            hidden: self.hn_hidden,
            lr: self.hn_lr,
        }
    }
}
