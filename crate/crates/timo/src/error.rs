use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between operands.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("numeric error: {0}")]
    NonFinite(String),

    /// A serialized artifact violates its schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Malformed binary container (bad magic, version, or truncation).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
