use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate user id `{0}`")]
    DuplicateUser(String),

    #[error("unknown dimension `{0}` (expected one of IE, SN, TF, PJ)")]
    UnknownDimension(String),

    #[error("questionnaire structure: {0}")]
    Structure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing embedding for key `{0}`")]
    MissingEmbedding(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("prompt template: {0}")]
    Template(String),

    #[error("llm request failed: {0}")]
    Llm(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("coverage gap: {0}")]
    Coverage(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
