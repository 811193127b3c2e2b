use thiserror::Error;

pub type Result<T> = std::result::Result<T, AgtError>;

#[derive(Debug, Error)]
pub enum AgtError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A cache or artifact was used with a model it does not belong to.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid trial: {0}")]
    InvalidTrial(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl AgtError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        AgtError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AgtError::Config(msg.into())
    }
}
