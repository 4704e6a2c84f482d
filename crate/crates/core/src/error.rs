use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported feature: {0}")]
    Unsupported(String),

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    Dimension { left: [usize; 3], right: [usize; 3] },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("placement infeasible for instance {index} after {attempts} attempts")]
    Capacity { index: usize, attempts: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dataset error: missing prediction for model `{model}`, image `{image}`")]
    MissingPrediction { model: String, image: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
