use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter-vector shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A public operation produced a NaN or infinite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid argument outside shape concerns (labels, sizes, ratios).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent configuration (family mismatch, invalid mode combo).
    #[error("config error: {0}")]
    Config(String),

    /// Config-file or checkpoint parse failure.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
