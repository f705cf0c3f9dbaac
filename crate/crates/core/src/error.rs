use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid window spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("region out of bounds: {0}")]
    OutOfBounds(String),

    #[error("{} already exists", .0.display())]
    AlreadyExists(PathBuf),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("patch {index} has already been accumulated")]
    AlreadyAccumulated { index: usize },

    #[error("{count} output voxels have zero accumulated weight")]
    Coverage { count: u64 },

    #[error("incomplete input: expected {expected} patch results, received {received}")]
    Incomplete { expected: usize, received: usize },

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("unrecognized artifact at {}", .0.display())]
    Unrecognized(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpec(_) | Error::Shape(_) | Error::IndexOutOfRange { .. } => 2,
            Error::OutOfBounds(_) | Error::AlreadyAccumulated { .. } => 2,
            Error::Io { .. } | Error::Format(_) | Error::AlreadyExists(_) => 3,
            Error::Unrecognized(_) => 3,
            Error::Coverage { .. } => 4,
            Error::Incomplete { .. } => 5,
            Error::UndefinedStatistic(_) => 1,
        }
    }
}
