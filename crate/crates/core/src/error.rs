use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("filter has zero L2 norm")]
    DegenerateFilter,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested method does not apply to this model (head kind, architecture).
    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("mask is empty, no component to localize")]
    EmptyMask,

    #[error(transparent)]
    ModelFile(#[from] ModelFileError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a `.tnet` model file. Each variant has a stable code.
#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("blob truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checksum mismatch for tensor {tensor}")]
    Checksum { tensor: String },
}

impl ModelFileError {
    pub fn code(&self) -> u8 {
        match self {
            ModelFileError::Manifest(_) => 10,
            ModelFileError::Truncated { .. } => 11,
            ModelFileError::Checksum { .. } => 12,
        }
    }
}
