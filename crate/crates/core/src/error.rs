use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("trajectory has no stochastic steps")]
    NoStochasticSteps,

    #[error("no reward targets registered for condition {0}")]
    MissingTargets(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Failures of the numerics themselves, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::NoStochasticSteps | Error::CheckFailed(_))
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
