use std::path::PathBuf;

use crate::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("alignment error: source has {source_lines} lines, target has {target_lines}")]
    Alignment {
        source_lines: usize,
        target_lines: usize,
    },

    #[error("encoding error: {path} line {line} is not valid UTF-8")]
    Encoding { path: PathBuf, line: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("step {t} is outside the schedule range 0..={max}")]
    Step { t: usize, max: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("inconsistent diffusion state: {0}")]
    Inconsistent(String),

    #[error("oracle refuses instance with {vocab} tokens and length {len} (limit 8 tokens, length 4)")]
    OracleScale { vocab: usize, len: usize },

    #[error("token id {0} is out of vocabulary range")]
    UnknownId(TokenId),

    #[error("subword {0:?} is not in the vocabulary")]
    UnknownSubword(String),

    #[error("evaluation error at line {line}: {message}")]
    Evaluation { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
