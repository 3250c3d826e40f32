use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MatteError>;

/// One row of an optimization trace: (iteration, pyramid level, objective).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub level: usize,
    pub objective: f64,
}

#[derive(Debug, Error)]
pub enum MatteError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("optimization diverged after {} trace points", trace.len())]
    Diverged { trace: Vec<TracePoint> },
}

impl MatteError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MatteError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MatteError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        MatteError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MatteError::Io {
            path: path.into(),
            source,
        }
    }
}
