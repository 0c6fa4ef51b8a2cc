use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Unreadable or malformed file (missing sidecar, bad JSON, bad magic).
    #[error("format error: {0}")]
    Format(String),

    /// Data that parsed but violates an invariant (shape mismatch, bad label code).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("availability error: {0}")]
    Availability(String),

    #[error("supervision error: {0}")]
    Supervision(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
