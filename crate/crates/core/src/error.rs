use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Raised when tensor or raster dimensions are incompatible.
    #[error("shape error: {0}")]
    Shape(String),
    /// Raised when a scalar argument or label is out of its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Configuration validation failures, all collected at once.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("configuration hash mismatch: checkpoint has {expected}, run has {actual}")]
    ConfigMismatch { expected: String, actual: String },
    #[error("non-finite loss `{metric}` = {value} at step {step}")]
    NonFinite {
        step: u64,
        metric: String,
        value: f64,
    },
    #[error("stylizer failed at cell ({row}, {col}): {source}")]
    Stylizer {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
