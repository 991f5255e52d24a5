use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("geometry inconsistency: {0}")]
    Geometry(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("duplicate seq_id {0:?}")]
    DuplicateSeqId(String),
    #[error("unknown view label {0:?}")]
    UnknownLabel(String),
    #[error("missing referenced file {0}")]
    MissingFile(PathBuf),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (non-finite losses, gradients or values).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
