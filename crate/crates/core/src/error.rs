use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated payload: expected at least {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: u64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("unresolvable ids: {}", .0.join(", "))]
    UnresolvedIds(Vec<String>),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero-norm row for id {0:?}")]
    ZeroNorm(String),

    #[error("k={k} out of range for {available} candidates")]
    KOutOfRange { k: usize, available: usize },

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("protocol mismatch: {0}")]
    Protocol(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFiniteGradient(_))
    }
}
