use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"ADT1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated tensor payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("shape {shape:?} implies {expected} elements but {found} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("non-finite element at flat index {0}")]
    NonFinite(usize),

    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no statistics for class {0}")]
    UnknownClass(i64),

    #[error("model mode mismatch: expected {expected}, model is {found}")]
    ModeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("non-finite training loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::ModeMismatch { .. } => ErrorKind::Usage,
            Error::NonFinite(_)
            | Error::NonFiniteLoss(_)
            | Error::NonFiniteGradient(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}
