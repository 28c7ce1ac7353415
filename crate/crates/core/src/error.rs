use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate article_id {article_id:?} (first seen on line {first_line})")]
    DuplicateArticle {
        path: PathBuf,
        line: usize,
        first_line: usize,
        article_id: String,
    },

    #[error("{0}: empty file")]
    EmptyFile(PathBuf),

    /// Dataset or corpus content violates an invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown article ids: {}", .0.join(", "))]
    UnknownArticles(Vec<String>),

    #[error("unknown literatures: {}", .0.join(", "))]
    UnknownLiteratures(Vec<String>),

    #[error("no data")]
    NoData,

    #[error("empty rewrite")]
    EmptyRewrite,

    #[error("template {template}: unresolved placeholder {{{placeholder}}}")]
    UnresolvedPlaceholder {
        template: String,
        placeholder: String,
    },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    /// A single backend attempt failed; retried by callers.
    #[error("backend {backend}: {message}")]
    Backend { backend: String, message: String },

    #[error("backend call {request_hash} failed after {attempts} attempts: {last}")]
    RetriesExhausted {
        request_hash: String,
        attempts: u32,
        last: String,
    },

    #[error("embedding batch {batch} (texts {start}..{end}) failed: {message}")]
    EmbeddingBatch {
        batch: usize,
        start: usize,
        end: usize,
        message: String,
    },

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index file {path}: {message}")]
    IndexFormat { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("trace/gold mismatch, unmatched turns: {}", .0.join(", "))]
    TurnMismatch(Vec<String>),

    #[error("all {0} turns failed")]
    AllTurnsFailed(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 backend, 3 total failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend { .. }
            | Error::RetriesExhausted { .. }
            | Error::EmbeddingBatch { .. }
            | Error::DimensionMismatch { .. } => 2,
            Error::AllTurnsFailed(_) => 3,
            _ => 1,
        }
    }
}
