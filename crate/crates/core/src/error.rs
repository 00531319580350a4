use std::path::PathBuf;

use ehct_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EhctError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EhctError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EhctError::Io { path: path.into(), source }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            EhctError::Config(_) | EhctError::Checkpoint(_) => 2,
            EhctError::Numeric(_) => 4,
            EhctError::Json { .. }
            | EhctError::Dimension(_)
            | EhctError::Validation(_)
            | EhctError::Io { .. }
            | EhctError::Image { .. }
            | EhctError::Tensor(_) => 3,
        }
    }
}

pub type Result<T, E = EhctError> = std::result::Result<T, E>;
