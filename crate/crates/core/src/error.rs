use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty after filtering")]
    EmptyDataset,
    #[error("dataset too small: need at least {needed} examples, got {got}")]
    DatasetTooSmall { needed: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("item id {id} out of range for vocabulary of {n_items}")]
    IdOutOfRange { id: usize, n_items: usize },
    #[error("non-finite sample weight at position {index}")]
    NonFiniteWeight { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("target item {item} has zero training frequency")]
    ZeroFrequencyTarget { item: usize },
    #[error("gradient norm below 1e-12; perturbation undefined")]
    ZeroGradient,
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("no examples in scope {0}")]
    EmptyScope(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad configuration or input files rather than
    /// numerical or domain failures.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::Parse { .. })
    }
}
