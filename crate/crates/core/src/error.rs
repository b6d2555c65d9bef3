use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("bag `{bag_id}` scale `{scale}`: manifest declares {rows}x{cols} ({expected_bytes} bytes) but file holds {actual_bytes} bytes")]
    SizeMismatch {
        bag_id: String,
        scale: String,
        rows: usize,
        cols: usize,
        expected_bytes: u64,
        actual_bytes: u64,
    },
    #[error("bag `{bag_id}` is missing scale `{scale}`")]
    MissingScale { bag_id: String, scale: String },
    #[error("stale prototype cache: built with config digest {found}, requested {expected}")]
    StaleCache { expected: String, found: String },
    #[error("no prototypes for bag `{0}`")]
    MissingPrototypes(String),
    #[error("non-finite loss at epoch {epoch}, bag `{bag_id}`")]
    NonFinite { epoch: usize, bag_id: String },
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io { .. }
            | Error::Manifest { .. }
            | Error::Version { .. }
            | Error::SizeMismatch { .. }
            | Error::MissingScale { .. }
            | Error::StaleCache { .. }
            | Error::MissingPrototypes(_)
            | Error::UndefinedAuc(_) => ErrorKind::Data,
            Error::Tensor(_) | Error::NonFinite { .. } => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
