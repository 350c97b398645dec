//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by the pipeline.
///
/// The CLI maps these onto exit codes: usage problems exit 2, everything
/// else exits 1 with the category printed on stderr.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A file or byte stream did not match its expected format.
    #[error("format error: {0}")]
    Format(String),

    /// The format was recognized but an encoding within it is not handled.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A required prerequisite (checkpoint, vocabulary, ...) is missing.
    #[error("dependency error: {0}")]
    Dependency(String),

    /// A numeric computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The pipeline configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Machine-readable category tag, printed on stderr by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Format(_) => "format",
            Error::Unsupported(_) => "unsupported",
            Error::Dependency(_) => "dependency",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
