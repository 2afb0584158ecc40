use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss was evaluated outside its domain, e.g. `log(0)`.
    #[error("domain error: {0}")]
    Domain(String),

    /// Libra-loss with all probability mass on allowed outputs: the value is
    /// `-inf` and the fit is complete.
    #[error("fit complete: allowed mass is 1")]
    FitComplete,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} on sample {sample}")]
    NonFiniteLoss { step: usize, sample: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
