use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("alignment infeasible for {head} target of utterance {utterance}: {labels} labels need {needed} frames, have {frames}")]
    AlignmentInfeasible {
        head: String,
        utterance: String,
        labels: usize,
        needed: usize,
        frames: usize,
    },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("non-finite gradient in parameter `{param}` at update {update}")]
    NonFiniteGradient { param: String, update: usize },

    #[error("search space of {paths} paths exceeds the enumeration guard of {limit}")]
    SizeGuard { paths: u128, limit: u128 },

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unknown character {ch:?} in word {word:?}")]
    UnknownCharacter { word: String, ch: char },

    #[error("word {0:?} is not in the lexicon")]
    OutOfLexicon(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
