use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::grad::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("empty tree at line {line}, column {column}")]
    EmptyTree { line: usize, column: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid format: {0}")]
    Format(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("non-finite value in parameter `{0}`")]
    NonFiniteParam(String),
    #[error("sentence of length {n} is too long for brute-force enumeration (max {max})")]
    TooLong { n: usize, max: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("config hash mismatch: checkpoint {checkpoint:016x}, requested {requested:016x}")]
    ConfigHash { checkpoint: u64, requested: u64 },
    #[error("code has {actual} bits, model has {expected}")]
    Bits { expected: usize, actual: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Grad(#[from] GradError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
