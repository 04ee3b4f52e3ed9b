use thiserror::Error;

/// Errors raised by samplers, schedulers, metrics and the scenario harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("invalid config: {}", .0.join("; "))]
    Validation(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn divergence(step: u64, detail: impl Into<String>) -> Self {
        Error::Divergence {
            step,
            detail: detail.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
