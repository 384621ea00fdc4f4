use thiserror::Error;

/// Errors surfaced by the simulator. The short lowercase token at the start
/// of each message is the stable error code tested against by callers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-scalar-root: backward needs a rank-0 tensor, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("label-range: class id {found} out of range for {classes} classes")]
    LabelRange { found: u8, classes: usize },
    #[error("lambda: mixing weights must be nonnegative and sum to 1 (sum was {0})")]
    Lambda(f64),
    #[error("layout: {0}")]
    Layout(String),
    #[error("incomplete-round: missing upload from site {0}")]
    IncompleteRound(usize),
    #[error("diverged: non-finite loss at site {site}, round {round}, step {step}")]
    Diverged {
        site: usize,
        round: usize,
        step: usize,
    },
    #[error("hn-diverged: non-finite hypernetwork update for site {0}")]
    HnDiverged(usize),
    #[error("empty: {0}")]
    Empty(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("verify: {0}")]
    Verify(String),
}

pub type Result<T> = std::result::Result<T, Error>;
