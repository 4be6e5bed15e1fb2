//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (bad learning rate, unknown key, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A numeric invariant was violated (NaN/Inf escaped an operation).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called out of order (backward without forward, ...).
    #[error("state error: {0}")]
    State(String),

    /// Input data violates its contract (label out of range, empty set, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file failed to decode (bad magic, CRC mismatch, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// A verification routine could not be evaluated.
    #[error("verification error: {0}")]
    Verification(String),

    /// Models handed to the aggregator are not architecturally identical.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
