use thiserror::Error;

/// Error type shared across the crate.
///
/// The variants map onto the failure classes surfaced by the CLI:
/// configuration problems, shape/data mismatches, and numeric failures.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }
}
