use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("negative saccade count in sentence {sentence_id} at ({row}, {col})")]
    NegativeSaccade { sentence_id: String, row: usize, col: usize },

    #[error("matrix not square: {0}")]
    NotSquare(String),

    #[error("unknown sentence_id {0}")]
    UnknownSentence(String),

    #[error("missing sentence {0}")]
    MissingSentence(String),

    #[error("invalid sentence id {0:?}: expected <article>:<index>")]
    BadSentenceId(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate row {0}: zero mass on causal support")]
    DegenerateRow(usize),

    #[error("absolute continuity violated at index {0}")]
    AbsoluteContinuity(usize),

    #[error("too few layers to quarter: {0}")]
    TooFewLayers(usize),

    #[error("layer {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("run rejected: {0}")]
    Rejected(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
