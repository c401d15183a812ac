//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a config) disagree on shape.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument violates an operation's preconditions.
    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    /// A forward op produced NaN/Inf from finite inputs (overflow is an
    /// error, never a silent value).
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// A file failed to parse; `offset` is the byte position of the problem.
    #[error("{path}: {msg} (byte offset {offset})")]
    Format {
        path: String,
        msg: String,
        offset: u64,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Training hit NaN; the last good checkpoint is reported by the caller.
    #[error("training diverged: {msg}")]
    Diverged { msg: String },

    /// A pipeline stage produced nothing to work with.
    #[error("empty result: {msg}")]
    Empty { msg: String },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
            offset,
        }
    }

    /// Process exit code used by the CLI: 2 input error, 3 empty result,
    /// 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. }
            | Error::InvalidInput { .. }
            | Error::Format { .. }
            | Error::Io { .. } => 2,
            Error::Empty { .. } => 3,
            Error::NonFinite { .. } | Error::Diverged { .. } => 4,
        }
    }
}
