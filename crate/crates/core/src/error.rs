use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NeurankError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NeurankError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ingestion failed: {0}")]
    Ingestion(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
}

impl NeurankError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NeurankError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, line: usize, message: impl Into<String>) -> Self {
        NeurankError::Parse {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }
}
