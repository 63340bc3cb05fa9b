//! Crate-wide error type.
//!
//! Errors are grouped into four families so the command-line front end can
//! map them to distinct exit codes: configuration problems, invalid inputs
//! (shapes, labels, batch contracts), I/O and file-format trouble, and
//! numerical failures (non-finite values, failed verification checks).

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad or missing configuration (unknown key, unparsable value, missing path).
    #[error("config error: {0}")]
    Config(String),

    /// Structurally invalid input: shape mismatch, label out of range,
    /// batch too small, broken layer chain.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// File exists but its contents violate the documented format.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// File carries a format version this build does not understand.
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// A NaN or Inf appeared where the numeric contract forbids it.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// A verification check (gradient check, invariant suite) exceeded tolerance.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error family.
    ///
    /// 0 is success; 2 validation, 3 I/O or file format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Io { .. } | Error::Corrupt(_) | Error::Version { .. } => 3,
            Error::NonFinite(_) | Error::CheckFailed(_) => 4,
        }
    }
}
