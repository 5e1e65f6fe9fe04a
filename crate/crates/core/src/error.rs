use thiserror::Error;

/// Errors produced across the detection pipeline.
#[derive(Debug, Error)]
pub enum MascError {
    /// Malformed JSON input; `offset` is the byte offset within the line.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Retryable remote failure that exhausted its attempts.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MascError {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        MascError::Precondition(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MascError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MascError::Config(msg.into())
    }
}

pub type Result<T, E = MascError> = std::result::Result<T, E>;
