use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("row {row} of `{arg}` sums to {sum}, expected 1")]
    NotNormalized {
        arg: &'static str,
        row: usize,
        sum: f64,
    },

    #[error("target index {index} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidToken { id: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("routing: {0}")]
    Routing(String),

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("infeasible task spec: {0}")]
    InfeasibleSpec(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("missing telemetry in {0}")]
    MissingTelemetry(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
