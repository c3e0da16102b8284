//! Crate-wide error type.

use thiserror::Error;

/// Errors raised anywhere in the attack pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A pixel (or other bounded value) is outside its valid range, or non-finite.
    #[error("value {value} out of range at ({y}, {x}, {channel}): {reason}")]
    Range {
        y: usize,
        x: usize,
        channel: usize,
        value: f64,
        reason: &'static str,
    },

    /// Array dimensions do not match what the operation requires.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A model backend failed and reported a message.
    #[error("backend `{id}` failed: {message}")]
    Backend { id: String, message: String },

    /// A model backend did not answer in time.
    #[error("backend `{id}` timed out after {attempts} attempt(s)")]
    Timeout { id: String, attempts: u32 },

    /// The backend does not support the requested capability (e.g. gradients).
    #[error("backend `{id}` does not support {capability}")]
    Capability { id: String, capability: &'static str },

    /// An embedding collapsed to (near) zero norm and cannot be normalized.
    #[error("degenerate embedding from encoder `{id}` (l2 norm {norm:e})")]
    DegenerateEmbedding { id: String, norm: f64 },

    /// A prompt template is malformed (missing or duplicated slots).
    #[error("template error: {0}")]
    Template(String),

    /// A generation backend returned empty or unresolved text.
    #[error("constructor `{id}` produced empty or unresolved output")]
    EmptyGeneration { id: String },

    /// External data was handed to an injector for a different surface.
    #[error("surface mismatch: expected {expected}, got {actual}")]
    Surface {
        expected: &'static str,
        actual: &'static str,
    },

    /// Experiment or component configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// File or serialization failure while persisting artifacts.
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn backend(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend {
            id: id.into(),
            message: message.into(),
        }
    }

    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl std::fmt::Display, message: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
