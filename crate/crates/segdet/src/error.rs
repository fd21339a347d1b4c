//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. The variants
//! are grouped by *who has to fix the problem*, which is also how the CLI
//! maps them onto process exit codes:
//!
//! * [`Error::Config`] — a configuration value, shape, or argument is
//!   inconsistent (caller mistake, fixable by editing the config).
//! * [`Error::Data`] — a dataset, image file, manifest, or checkpoint is
//!   malformed or unusable.
//! * [`Error::Numeric`] — training produced a non-finite value; the run
//!   must abort rather than continue with poisoned state.
//! * [`Error::Usage`] — an API was driven incorrectly (e.g. backward on a
//!   cleared tape); indicates a programming error in the caller.
//! * [`Error::Io`] — an underlying filesystem failure.

use thiserror::Error;

/// Any failure produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent configuration, shapes, or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unusable dataset files, manifests, or checkpoints.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value where training cannot meaningfully continue.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Incorrect API usage (e.g. backward through a cleared tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// Filesystem failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a [`Error::Config`] with a formatted message.
    pub fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }

    /// Shorthand for a [`Error::Data`] with a formatted message.
    pub fn data(msg: impl Into<String>) -> Error {
        Error::Data(msg.into())
    }

    /// Shorthand for a [`Error::Numeric`] with a formatted message.
    pub fn numeric(msg: impl Into<String>) -> Error {
        Error::Numeric(msg.into())
    }

    /// Shorthand for a [`Error::Usage`] with a formatted message.
    pub fn usage(msg: impl Into<String>) -> Error {
        Error::Usage(msg.into())
    }
}
