use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the prognostics stack.
#[derive(Debug, Error)]
pub enum RulError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unit {unit}: {message}")]
    Integrity { unit: u32, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed container: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = RulError> = std::result::Result<T, E>;

impl RulError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RulError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        RulError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
