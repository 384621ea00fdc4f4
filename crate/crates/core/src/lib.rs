//! Desk-scale simulator of a personalized federated segmentation protocol.
//!
//! Sites train small global/personalized-split transformer segmentation
//! models on heterogeneous synthetic data; a server aggregates personalized
//! parameters through per-site hypernetworks and global parameters through
//! sensitivity-weighted softmax mixing. Everything is deterministic given a
//! config and seed.

pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod rng;
pub mod server;
pub mod site;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{backward, Tensor};
