//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },

    #[error("{path}: unsupported image format ({reason})")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error(
        "{path}: expected an 8-bit single-channel image, found {found}; \
         convert it first (e.g. `magick in.png -colorspace Gray -depth 8 out.png`)"
    )]
    NotGrayscale { path: PathBuf, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Boundary points are collinear or otherwise cannot define a circle.
    #[error("region is not circular: {0}")]
    NonCircular(String),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    /// True when the failure was caused by the caller's inputs or settings
    /// rather than by a fault inside the toolkit.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_))
    }
}
