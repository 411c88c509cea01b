//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("division rejected: divisor magnitude {magnitude:e} below 1e-12 (use the epsilon-guarded variant)")]
    DivisorNearZero { magnitude: f64 },

    #[error("{op} rejected: input outside its domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got shape {got:?}")]
    NonScalarOutput { got: Vec<usize> },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {field}: {detail}")]
    Config { field: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{path}:{line}: malformed record: {detail}")]
    CorpusFormat {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("run aborted at step {step} (instances {instances:?}): {detail}")]
    RunAborted {
        step: usize,
        instances: Vec<String>,
        detail: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
