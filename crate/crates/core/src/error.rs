//! Error type shared by every pipeline stage.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A table failed structural validation; each string is one violation.
    #[error("invalid table: {}", .0.join("; "))]
    InvalidTable(Vec<String>),

    /// A source file could not be parsed at a specific line.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// An adapter input did not match its declared upstream schema.
    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Requested sample size exceeds the population, or a bad sampling spec.
    #[error("sampling: {0}")]
    Sampling(String),

    /// Prompt assembly violated a precondition (mixed kinds, missing rationale, k too large).
    #[error("prompt: {0}")]
    Prompt(String),

    /// The backend rejected the request; retrying will not help.
    #[error("backend permanent error (HTTP {status}): {body_excerpt}")]
    BackendPermanent { status: u16, body_excerpt: String },

    /// Transient failures (timeouts, 5xx) persisted past the retry budget.
    #[error("backend transient failures exhausted retries: {0}")]
    BackendTransientExhausted(String),

    /// The server answered but broke the wire contract.
    #[error("backend protocol error: {0}")]
    BackendProtocol(String),

    /// A metric or vote was asked to aggregate nothing.
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
