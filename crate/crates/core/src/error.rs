use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RaplError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("gradient check failed for {op}: {detail}")]
    GradCheck { op: String, detail: String },

    #[error("training state error: {0}")]
    State(String),

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RaplError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RaplError::Io {
            context: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, RaplError>;
