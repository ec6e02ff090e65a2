use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index {value} out of range for feature `{feature}` (cardinality {cardinality})")]
    Index {
        feature: String,
        value: usize,
        cardinality: usize,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("window error: {0}")]
    Window(String),

    #[error("load error at row {row}: {message}")]
    Load { row: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("NaN gradient for parameter `{param}` at optimizer step {step}")]
    NanGradient { param: String, step: u64 },

    #[error("training diverged in stage `{stage}` at epoch {epoch}, step {step}; restored last good parameters")]
    Divergence {
        stage: String,
        epoch: usize,
        step: u64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("percentage metric undefined: |actual| <= 1e-12 for record {0}")]
    PercentageMetric(String),

    #[error("unknown embedding `{feature}`; available: {available:?}")]
    Lookup {
        feature: String,
        available: Vec<String>,
    },

    #[error("degenerate (zero-norm) vector for label `{0}`")]
    DegenerateVector(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
