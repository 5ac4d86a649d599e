use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while decoding the binary clip and checkpoint containers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated {what}: expected {expected} bytes, got {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("malformed container: {0}")]
    Malformed(String),
}

impl FormatError {
    /// Stable numeric code for each corruption kind.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 10,
            FormatError::VersionMismatch { .. } => 11,
            FormatError::Truncated { .. } => 12,
            FormatError::Malformed(_) => 13,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("infeasible target {target:?}: needs at least {needed} frames, got {frames}")]
    InfeasibleTarget {
        target: Vec<usize>,
        needed: usize,
        frames: usize,
    },
    #[error("unsupported label pattern: {0}")]
    LabelPattern(String),
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::LabelPattern(_) => 1,
            Error::Numeric(_) => 3,
            Error::InfeasibleTarget { .. }
            | Error::Inconclusive(_)
            | Error::Data(_)
            | Error::Format(_)
            | Error::Io { .. } => 2,
        }
    }
}
