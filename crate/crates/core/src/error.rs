use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("sequence length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("decoder cache does not match {0}")]
    StaleCache(&'static str),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
