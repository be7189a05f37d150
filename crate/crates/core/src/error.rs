use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("missing field `{field}` in example `{id}`")]
    MissingField { id: String, field: String },

    #[error("example `{id}` has no label")]
    MissingLabel { id: String },

    #[error("no verbalization for label `{0}`")]
    MissingVerbalizer(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("unknown document id `{0}`")]
    UnknownId(String),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("no mock entry for context {context:?} / continuation {continuation:?}")]
    MockMiss {
        context: String,
        continuation: String,
    },

    #[error("tokenizer rejected input: {0}")]
    TokenizerRejection(String),

    #[error("backend `{0}` cannot generate")]
    GenerationUnsupported(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("server returned status {status}: {message}")]
    Status { status: u16, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient candidates: need {needed}, have {available}")]
    InsufficientCandidates { needed: usize, available: usize },

    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),

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

    /// True for failures caused by the backend being unreachable or
    /// misbehaving, as opposed to bad inputs.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            Error::Transport(_) | Error::Status { .. } | Error::Protocol(_)
        )
    }
}
