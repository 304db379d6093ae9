use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SanmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SanmError {
    /// Invalid configuration or arguments. The CLI maps this to exit code 2.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {stage}")]
    NonFinite { stage: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SanmError {
    pub fn config(msg: impl Into<String>) -> Self {
        SanmError::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        SanmError::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SanmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SanmError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by the caller's configuration rather than by the computation.
    pub fn is_config(&self) -> bool {
        matches!(self, SanmError::Config(_) | SanmError::Invalid(_))
    }
}
