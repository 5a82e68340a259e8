use std::io;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up (matmul, rotation side, layer input width, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An invalid parameter or configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    /// Calibration could not proceed (too few samples, empty dataset, ...).
    #[error("calibration error: {0}")]
    Calibration(String),

    /// A numerical failure while building a specific layer.
    #[error("numeric failure in layer {layer}: {msg}")]
    Numeric { layer: String, msg: String },

    /// Malformed on-disk artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
