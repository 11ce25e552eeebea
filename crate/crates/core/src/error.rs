use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate query: attention row {row} has no permitted key")]
    DegenerateQuery { row: usize },

    #[error("index {index} out of range (size {size})")]
    Range { index: usize, size: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("lookup error: unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file at byte offset {offset}: {reason}")]
    Corruption { offset: u64, reason: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("execution error: {0}")]
    Execution(String),

    #[error("incompatible layouts: checkpoint has `{checkpoint}`, config has `{config}`")]
    Compatibility { checkpoint: String, config: String },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: u64, reason: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
