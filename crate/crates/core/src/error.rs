//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MagmaError>;

#[derive(Debug, Error)]
pub enum MagmaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Factorization failed even after the jitter escalation ran out.
    #[error("singular matrix ({role}): Cholesky failed up to jitter {max_jitter:e}")]
    SingularMatrix { role: String, max_jitter: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("data format error at line {line}: {message}")]
    DataFormat { line: u64, message: String },

    #[error("duplicate observation for individual '{id}' at timestamp {timestamp} (line {line})")]
    DuplicateObservation {
        id: String,
        timestamp: f64,
        line: u64,
    },

    #[error("unsupported model file version {found}; this build reads versions up to {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MagmaError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        MagmaError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
