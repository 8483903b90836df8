use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root does not require grad")]
    RootWithoutGrad,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("coordinate ({row}, {col}) outside configured range rows<={max_rows}, cols<={max_cols}")]
    CoordinateOutOfRange {
        row: usize,
        col: usize,
        max_rows: usize,
        max_cols: usize,
    },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("decoding error: {0}")]
    Decoding(String),

    #[error("cell in column `{column}` has {len} tokens, limit is {limit}")]
    CellTooLong { column: String, len: usize, limit: usize },

    #[error("non-finite loss at step {step} (examples {example_ids:?}): nll={nll}, mse={mse}")]
    NonFiniteLoss {
        step: u64,
        example_ids: Vec<String>,
        nll: f64,
        mse: f64,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("record `{id}`: {msg}")]
    Record { id: String, msg: String },

    #[error("header mismatch, symmetric difference: {0:?}")]
    HeaderMismatch(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
}
