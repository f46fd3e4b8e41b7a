use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid dataset ({row}): {message}")]
    Dataset { row: String, message: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("not a probability distribution: {0}")]
    NotDistribution(String),

    #[error("not a permutation of 0..{len}: {detail}")]
    InvalidPermutation { len: usize, detail: String },

    #[error("metric {metric} requires a probability-vector prediction")]
    IncompatiblePrediction { metric: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("client `{group}` failed: {source}")]
    Client {
        group: String,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
