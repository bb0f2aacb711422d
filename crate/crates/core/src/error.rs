//! Error type shared by every module, with the CLI exit-code mapping.

use thiserror::Error;

/// Failure classes. Each class maps to a fixed process exit code so batch
/// scripts can tell a bad config from a bad dataset from a numeric blow-up.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown key, unparseable value, invariant violation.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset problems: missing partner file, undecodable image, size mismatch.
    #[error("data error: {0}")]
    Data(String),
    /// Numeric failures: non-finite loss, failed self-check, shape violation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Filesystem and serialization failures.
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }

    /// Exit code for the CLI: config=2, data=3, numeric=4, io=5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attach a path to a raw io::Error.
pub fn io_err(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}
