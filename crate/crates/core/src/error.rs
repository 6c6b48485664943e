use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A single input record violates a data invariant.
    #[error("invalid record {record}: {reason}")]
    InvalidRecord { record: String, reason: String },

    /// Input collection as a whole is unusable (empty strata, misaligned lengths, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Model artifacts do not fit the data they are applied to.
    #[error("data/model mismatch: {0}")]
    Mismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}; parameters restored from epoch {restored_epoch}")]
    Diverged { epoch: usize, restored_epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn record(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidRecord {
            record: record.into(),
            reason: reason.into(),
        }
    }
}
