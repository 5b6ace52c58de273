//! Crate-wide error type.

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

    #[error("parameter `{0}` is frozen and cannot receive gradients")]
    FrozenParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("rank error: rank {rank} is invalid for a {n_in}x{n_out} projection")]
    Rank {
        rank: usize,
        n_in: usize,
        n_out: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },

    #[error("optimizer error on parameter `{param}`: {message}")]
    Optimizer { param: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("sharding error: cannot split {batch} examples across {workers} workers")]
    Sharding { batch: usize, workers: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("synchronization error: {0}")]
    Synchronization(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error on line {line}: missing or empty field `{field}`")]
    Schema { line: usize, field: &'static str },

    #[error("input error: {0}")]
    Input(String),

    #[error("label error: gold label `{0}` is not one of the configured classes")]
    Label(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the name of the run stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
