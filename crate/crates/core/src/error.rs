use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map onto CLI exit codes: config errors
/// exit 2, I/O and shape errors exit 3, a training abort exits 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training aborted at step {step}: non-finite {term} ({value})")]
    NonFiniteLoss { step: u64, term: String, value: f64 },

    #[error("checkpoint config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 I/O or shape, 4 aborted run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CheckpointMismatch(_) => 2,
            Error::Shape(_) | Error::Domain(_) | Error::Io { .. } | Error::Image(_)
            | Error::Serde(_) => 3,
            Error::NonFiniteLoss { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
