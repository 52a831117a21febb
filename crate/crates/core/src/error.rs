use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("graph state: {0}")]
    State(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },

    #[error("data: {0}")]
    Data(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error(
        "non-finite loss at epoch {epoch}, step {step}; per-language losses {losses:?}"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        losses: Vec<f64>,
    },

    #[error("checkpoint field `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }
}
