use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid joint `{joint}`: {reason}")]
    InvalidJoint { joint: String, reason: String },

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("kinematic cycle through link `{0}`")]
    Cycle(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty dataset: {raw} raw samples, {pruned} pruned by IK error, 0 survivors")]
    EmptyDataset { raw: usize, pruned: usize },

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Model weights after the last epoch that finished with a finite loss.
        last_stable: Option<Box<crate::kmp::KmpModel>>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
