use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for table of {len} rows")]
    Index { index: usize, len: usize },

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    Divergence { param: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("utterance `{id}`: {message}")]
    Utterance { id: String, message: String },

    #[error("invalid tensor file {path}: {message}")]
    TensorFormat { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn utterance(id: &str, message: impl Into<String>) -> Self {
        Error::Utterance {
            id: id.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by numerical blow-up during training.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFiniteLoss { .. })
    }
}
