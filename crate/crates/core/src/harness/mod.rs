//! Experiment orchestration: configuration, the communication-round loop,
//! baselines and ablations, evaluation, persistence, and verification.

pub mod config;
pub mod report;
pub mod run;
pub mod verify;

pub use config::{Components, ExperimentConfig, Mode};
pub use report::{format_summary, regenerate_summary, ExperimentSummary};
pub use run::{argmax_mask, evaluate, run_experiment, run_single_seed, MessageStats};
pub use verify::{verify_dir, VerifyReport};
