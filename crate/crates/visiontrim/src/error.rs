//! Error type shared across the crate.
//!
//! Validation failures (bad shapes, invalid budgets, malformed tensor files)
//! are kept distinct from I/O failures so the CLI can map them to different
//! exit codes.

use std::fmt;
use std::io;
use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Shape, range, or argument violation.
    Validation(String),
    /// A tensor element was NaN or infinite.
    NonFinite { index: usize },
    /// Tensor file does not start with the `VTTF` magic bytes.
    BadMagic,
    /// Tensor file declares an unsupported format version.
    UnsupportedVersion(u8),
    /// Tensor file declares an unsupported element dtype.
    UnsupportedDtype(u8),
    /// Tensor file declares a rank outside 1..=3.
    BadRank(u8),
    /// Payload byte count disagrees with the declared dims.
    PayloadLengthMismatch { expected: usize, actual: usize },
    /// Underlying I/O failure, tagged with the path involved.
    Io { path: PathBuf, source: io::Error },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to (2 validation, 3 I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::NonFinite { index } => {
                write!(f, "non-finite value at flat index {index}")
            }
            Error::BadMagic => write!(f, "bad magic: not a VTTF tensor file"),
            Error::UnsupportedVersion(v) => write!(f, "unsupported VTTF version {v}"),
            Error::UnsupportedDtype(d) => write!(f, "unsupported VTTF dtype {d}"),
            Error::BadRank(r) => write!(f, "invalid VTTF rank {r} (expected 1..=3)"),
            Error::PayloadLengthMismatch { expected, actual } => {
                write!(
                    f,
                    "payload length mismatch: expected {expected} bytes, found {actual}"
                )
            }
            Error::Io { path, source } => {
                write!(f, "i/o error on {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
