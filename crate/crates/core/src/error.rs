use thiserror::Error;

/// Errors raised by the library. Each variant maps to a stable integer code
/// used by the CLI exit status and the C interface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Negative integer code for the C interface; `0` is reserved for success.
    pub fn code(&self) -> i32 {
        match self {
            Error::DimensionMismatch { .. } => -1,
            Error::Degenerate(_) => -2,
            Error::InvalidArgument(_) => -3,
            Error::NonFinite(_) => -4,
            Error::UnknownLabel(_) => -5,
            Error::Precondition(_) => -6,
            Error::Config(_) => -7,
            Error::Io(_) => -8,
            Error::Json(_) => -9,
            Error::Csv(_) => -10,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
