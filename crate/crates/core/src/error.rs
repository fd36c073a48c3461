use thiserror::Error;

/// Errors raised by tensor kernels, layers, builders and the experiment harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward called without a matching forward ({0})")]
    MissingCache(&'static str),
    #[error("degenerate batch statistics: {0}")]
    DegenerateBatch(String),
    #[error("non-finite values encountered: {0}")]
    NonFinite(String),
    #[error("unsupported network: {0}")]
    Unsupported(String),
    #[error("malformed data file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
