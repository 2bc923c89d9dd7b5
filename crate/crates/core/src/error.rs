use std::path::PathBuf;

use crate::volume::Dims;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error in {path}: field `{field}`: {reason}")]
    Format {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("size error in {path}: expected {expected} bytes, found {actual}")]
    Size {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: Dims, right: Dims },

    #[error("invalid argument `{field}`: {reason}")]
    Argument { field: String, reason: String },

    #[error("index {index} out of range along {axis} (extent {extent})")]
    OutOfRange {
        axis: &'static str,
        index: i64,
        extent: usize,
    },

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("invalid region partition: {0}")]
    Partition(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("non-finite gradient at iteration {iteration}")]
    Numeric { iteration: u64 },

    #[error("operation `{op}` not allowed in stage {stage}")]
    Stage { op: &'static str, stage: String },
}

/// Coarse classification used by frontends to pick exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Argument,
    Data,
    Numeric,
    State,
}

impl Error {
    pub fn argument(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Argument {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Format { .. } | Error::Size { .. } | Error::Io { .. } | Error::DimMismatch { .. } => {
                ErrorKind::Data
            }
            Error::Argument { .. }
            | Error::OutOfRange { .. }
            | Error::EmptyMask
            | Error::Partition(_)
            | Error::Unsupported(_) => ErrorKind::Argument,
            Error::Numeric { .. } => ErrorKind::Numeric,
            Error::Stage { .. } => ErrorKind::State,
        }
    }
}
