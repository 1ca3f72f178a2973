use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape error: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced (operand shapes {shapes:?})")]
    NonFinite {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: loss is detached from every gradient-requiring leaf")]
    DetachedGraph,

    #[error("tensor file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data validation failed: {0}")]
    Data(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error came from a NaN/Inf guard.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged(_))
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Diverged(_) => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
