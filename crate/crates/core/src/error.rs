//! Unified error type for the whole stack.
//!
//! The variants map one-to-one onto the process exit codes used by the
//! command-line tool: validation problems (`Dim`, `Config`, `Contract`)
//! exit 1, `Verify` exits 2 and `Io` exits 3.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or sizes that cannot be combined.
    #[error("dimension error: {0}")]
    Dim(String),
    /// A configuration value (file, flag or struct field) is invalid.
    #[error("config error: {0}")]
    Config(String),
    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A numerical verification (gradient check, oracle comparison) failed.
    #[error("verification failure: {0}")]
    Verify(String),
    /// Filesystem or file-format trouble; the message names the path.
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn verify(msg: impl Into<String>) -> Self {
        Error::Verify(msg.into())
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Error::Io(format!("{}: {}", path.display(), err))
    }

    pub fn io_msg(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
