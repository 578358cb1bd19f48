use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error in utterance {id}: {detail}")]
    Data { id: String, detail: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: no eligible negatives for class {0}")]
    Sampling(String),

    #[error("load error at record {record}, field `{field}`: {detail}")]
    Load {
        record: String,
        field: String,
        detail: String,
    },

    #[error("validation error in record {record}: {detail}")]
    Validation { record: String, detail: String },

    #[error("fold error: {0}")]
    Fold(String),

    #[error("generator spec error: {0}")]
    Spec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("file error at {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures (NaN, divergence) are distinguished from input and
    /// configuration problems so the CLI can map them to separate exit codes.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
