//! Error type shared by the whole crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot encode image {path}: {source}")]
    ImageEncode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("unsupported image layout in {path}: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("bad flow file {path}: {reason}")]
    BadFlowFile { path: PathBuf, reason: String },

    #[error("dimension mismatch: {reason}")]
    DimensionMismatch { reason: String },

    #[error("invalid argument: {reason}")]
    InvalidArgument { reason: String },

    #[error("flow cell ({x},{y}) is empty but the operation needs a value")]
    EmptyCell { x: usize, y: usize },

    #[error("no seeds left after {stage}")]
    NoSeeds { stage: String },
}

impl Error {
    pub fn dims(reason: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            reason: reason.into(),
        }
    }

    pub fn arg(reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            reason: reason.into(),
        }
    }
}
