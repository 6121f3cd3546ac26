use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("index {index} out of range for size {size}")]
    OutOfRange { index: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no convergence after {sweeps} iterations (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("adapter/base mismatch")]
    FingerprintMismatch,

    #[error("degenerate routing")]
    DegenerateRouting,

    #[error("zero-norm adapter: {0}")]
    ZeroNorm(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("truncated file: {}", .0.display())]
    Truncated(PathBuf),

    #[error("bad magic in {}", .0.display())]
    BadMagic(PathBuf),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("step `{step}` failed: {source}")]
    Step {
        step: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn at_step(self, step: impl Into<String>) -> Error {
        Error::Step {
            step: step.into(),
            source: Box::new(self),
        }
    }
}
