use std::fmt;

use thiserror::Error;

use crate::types::Speaker;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure category for remote model backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendErrorKind {
    /// Backend could not be reached or returned a server error.
    Unavailable,
    Timeout,
    /// Backend answered with something that does not follow the wire contract.
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{backend} backend {kind}: {message}")]
pub struct BackendError {
    pub backend: &'static str,
    pub kind: BackendErrorKind,
    pub message: String,
}

impl BackendError {
    pub fn new(backend: &'static str, kind: BackendErrorKind, message: impl Into<String>) -> Self {
        Self {
            backend,
            kind,
            message: message.into(),
        }
    }

    /// Unavailable and timed-out backends may succeed on retry; malformed replies will not.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self.kind,
            BackendErrorKind::Unavailable | BackendErrorKind::Timeout
        )
    }
}

impl fmt::Display for BackendErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendErrorKind::Unavailable => "unavailable",
            BackendErrorKind::Timeout => "timed out",
            BackendErrorKind::Malformed => "returned a malformed response",
        })
    }
}

/// A corpus line that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus has {} malformed line(s); first: {}", .0.len(), .0[0])]
    Corpus(Vec<LineError>),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("persona owned by {persona} cannot be written to the {store} memory")]
    OwnerMismatch { store: Speaker, persona: Speaker },

    #[error("memory capacity of {0} entries reached")]
    CapacityExceeded(usize),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("write-ahead log error: {0}")]
    Wal(String),
}

impl Error {
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend(_))
    }
}
