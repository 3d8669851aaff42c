use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid probability grid at voxel {voxel}: {reason}")]
    InvalidProbabilities { voxel: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("forward cache does not match the current parameters")]
    StaleCache,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable numeric code per error family, used for process exit status and
    /// for distinguishing file-format failures.
    pub fn code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::NonFinite(_) => 3,
            Error::BadMagic { .. } => 10,
            Error::VersionMismatch { .. } => 11,
            Error::Truncated(_) => 12,
            Error::Io(_) => 13,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
