use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("column `{column}` is missing from the CSV header")]
    MissingColumn { column: String },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("split requires at least {required} columns, table has {actual}")]
    TooFewColumns { required: usize, actual: usize },

    #[error("row {row} produced no tokens (all cells missing or binary zero)")]
    EmptyRow { row: usize },

    #[error("token id {id} out of range (embedding has {rows} rows)")]
    TokenOutOfRange { id: usize, rows: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("degenerate projection: zero-norm vector at row {0}")]
    ZeroNorm(usize),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid partition spec: {0}")]
    Partition(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("AUROC undefined: {0}")]
    Auroc(String),

    #[error("model is frozen: {0}")]
    Frozen(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
