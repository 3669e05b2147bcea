//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all pipeline stages.
#[derive(Debug, Error)]
pub enum PccError {
    /// Transport failure that persisted through every retry.
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },

    /// The backend answered with blank text.
    #[error("backend returned an empty response")]
    EmptyResponse,

    /// A mock script with `exhaustion_policy = error` ran out of entries.
    #[error("mock script exhausted after {served} response(s)")]
    ScriptExhausted { served: usize },

    /// A response or file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Tensor or grid dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A dataset directory or file violates the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Run configuration is invalid or incomplete.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PccError>;

impl PccError {
    pub fn shape(msg: impl Into<String>) -> Self {
        PccError::Shape(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        PccError::Parse(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        PccError::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        PccError::Config(msg.into())
    }
}
