use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema must contain at least one field")]
    EmptySchema,
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("label must be 0 or 1, got `{0}`")]
    InvalidLabel(String),
    #[error("feature index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("non-finite value encountered ({0}); training diverged")]
    NonFinite(&'static str),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("AUC needs at least one positive and one negative label")]
    SingleClass,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("all learning rates diverged")]
    AllDiverged,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("model file error: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
