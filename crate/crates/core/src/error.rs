use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty suite")]
    EmptySuite,

    #[error("task generation failed: {0}")]
    TaskGeneration(String),

    #[error("split: {0}")]
    Split(String),

    #[error("trace has {got} points, task horizon needs {want}")]
    TraceLength { got: usize, want: usize },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("nnmf: {0}")]
    Nnmf(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("report: {0}")]
    Report(String),

    #[error("unknown task id {0}")]
    UnknownTask(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error in {path}: {message}")]
    ConfigParse { path: String, message: String },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
