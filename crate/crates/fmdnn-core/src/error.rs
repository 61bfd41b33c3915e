//! Error type shared across the core library.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor operations, model construction, and metric
/// computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shapes or dimensions do not agree for the requested operation.
    Dimension(String),
    /// An input value is outside the operation's domain.
    Input(String),
    /// The operation was used incorrectly (wrong call sequence, missing grad).
    Usage(String),
    /// A parameter set violates its own invariants.
    Parameter(String),
    /// A configuration is internally inconsistent.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Parameter(msg) => write!(f, "parameter error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
