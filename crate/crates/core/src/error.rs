use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("text is empty after tokenization")]
    TokenizationEmpty,
    #[error("gradient tape is empty")]
    TapeEmpty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("dataset too small: need at least {need} usable items, have {have}")]
    DatasetTooSmall { need: usize, have: usize },
    #[error("caption {0} is missing class annotations")]
    MissingAnnotation(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no relevant gallery items for query")]
    NoRelevantItems,
    #[error("all gains are zero for query")]
    AllZeroGains,
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("index {index} out of range for {len} items")]
    Index { index: usize, len: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("truncated payload in {0}")]
    TruncatedPayload(PathBuf),
    #[error("non-finite value in {0}")]
    NonFiniteValue(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
