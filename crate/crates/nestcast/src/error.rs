//! Crate-wide error type and exit-code categories.

use std::path::PathBuf;

/// Errors carried by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value first appeared in stage `{stage}`{}", at.as_ref().map(|s| format!(" ({s})")).unwrap_or_default())]
    NonFinite { stage: String, at: Option<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Data-format failures get their own category so the CLI can map them to a
/// dedicated exit code.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("payload hash mismatch in {path}: header says {expected}, payload is {actual}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("unknown dtype tag `{tag}` in {path}")]
    UnknownDtype { path: PathBuf, tag: String },

    #[error("dtype is {stored} but {requested} was requested; pass the conversion flag to allow this")]
    DtypeNeedsConversion { stored: String, requested: String },

    #[error("malformed header in {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Exit-code category: 1 runtime, 2 usage, 3 data format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) => 3,
            Error::InvalidArgument(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
