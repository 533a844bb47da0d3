use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema violations: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("decomposition failed after {attempts} attempt(s): {reason}")]
    Decomposition {
        attempts: usize,
        reason: String,
        last_raw: String,
    },

    /// Transport or contract failure inside a model backend. Retryable.
    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("VQA backend failed on question {question:?} / region {region}: {source}")]
    Cell {
        question: String,
        region: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cache corruption at key {key}: stored payload differs from new payload")]
    CacheCorruption { key: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported prompt: {0:?}")]
    UnsupportedPrompt(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("run interrupted after {0} sample(s)")]
    Interrupted(usize),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn backend(backend: &str, message: impl ToString) -> Self {
        Error::Backend {
            backend: backend.to_string(),
            message: message.to_string(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backend { .. })
    }
}
