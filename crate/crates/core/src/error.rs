use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NseError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error in record {record} at line {line}: {message}")]
    Parse {
        record: usize,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint version {found} (this build reads version {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl NseError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NseError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NseError::Io {
            path: path.into(),
            source,
        }
    }
}
