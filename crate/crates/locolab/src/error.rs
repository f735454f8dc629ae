use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Shapes, block layouts or wire payloads do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A codec rejected its input or a wire payload.
    #[error("codec error: {0}")]
    Codec(String),

    /// Non-finite number encountered while training; carries full context.
    #[error("numeric abort at step {step}, replica {replica}: {message}")]
    Numeric {
        step: u64,
        replica: usize,
        message: String,
    },

    /// An internal scheduling invariant was violated.
    #[error("schedule invariant violated: {0}")]
    Schedule(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
