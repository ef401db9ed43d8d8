use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {}x{}, right is {}x{}", left.0, left.1, right.0, right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}")]
    Domain(String),

    #[error("no projection pair for layer {layer}, head {head}")]
    MissingProjection { layer: usize, head: usize },

    #[error("index {index} out of range for length {len}")]
    OutOfBounds { index: usize, len: usize },

    #[error("sequence of length {len} exceeds maximum {max} for a position-embedding model")]
    Length { len: usize, max: usize },

    #[error("training diverged at step {step}; last finite loss {last_finite_loss}")]
    Divergence { step: usize, last_finite_loss: f64 },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
