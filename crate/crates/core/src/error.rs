use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 1,
            ErrorCategory::Io => 2,
            ErrorCategory::Numeric => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("unsupported dtype {dtype:?} for tensor {tensor}")]
    UnsupportedDtype { tensor: String, dtype: String },

    #[error("tensor not found: {0}")]
    TensorNotFound(String),

    #[error("tensor {tensor}: non-finite value at index {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("tensor {tensor}: value {value} at index {index} overflows {dtype}")]
    DtypeOverflow {
        tensor: String,
        index: usize,
        value: f64,
        dtype: &'static str,
    },

    #[error("invalid tensor {tensor}: {reason}")]
    InvalidTensor { tensor: String, reason: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("antipodal points (inner product {inner:.3e}){}", fmt_iteration(.iteration))]
    Antipodal {
        inner: f64,
        iteration: Option<usize>,
    },

    #[error("degenerate vector (norm {norm:.3e}) cannot be placed on the sphere")]
    Degenerate { norm: f64 },

    #[error("vector is not tangent at the base point (|<p,v>| = {inner:.3e})")]
    NotTangent { inner: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("alignment check failed: {0}")]
    Alignment(String),

    #[error("tensor {tensor}: {source}")]
    InTensor {
        tensor: String,
        #[source]
        source: Box<Error>,
    },
}

fn fmt_iteration(iteration: &Option<usize>) -> String {
    match iteration {
        Some(i) => format!(" at iteration {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Attach a tensor name unless the error already carries one.
    pub fn in_tensor(self, tensor: &str) -> Self {
        match self {
            e @ (Error::InTensor { .. }
            | Error::NonFinite { .. }
            | Error::DtypeOverflow { .. }
            | Error::UnsupportedDtype { .. }
            | Error::InvalidTensor { .. }
            | Error::TensorNotFound(_)) => e,
            e => Error::InTensor {
                tensor: tensor.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. }
            | Error::Malformed { .. }
            | Error::UnsupportedDtype { .. }
            | Error::TensorNotFound(_) => ErrorCategory::Io,
            Error::NonFinite { .. }
            | Error::DtypeOverflow { .. }
            | Error::Antipodal { .. }
            | Error::Degenerate { .. }
            | Error::NotTangent { .. } => ErrorCategory::Numeric,
            Error::InvalidTensor { .. }
            | Error::LengthMismatch { .. }
            | Error::InvalidArgument(_)
            | Error::Alignment(_) => ErrorCategory::Config,
            Error::InTensor { source, .. } => source.category(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
