//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories used across the pipeline.
///
/// Each variant carries a human-readable detail string; callers match on the
/// variant, diagnostics read the message.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor/layer shape disagreement. Carries the offending shapes.
    Dimension(String),
    /// An API precondition was violated (bad spec fields, misaligned masks, ...).
    Contract(String),
    /// A label or index is out of range.
    Index(String),
    /// A file is not in the expected format (magic, version, schema).
    Format(String),
    /// Two inputs that must agree do not (e.g. image/label counts).
    Consistency(String),
    /// A file parsed but its payload is damaged (truncation, checksum).
    Integrity(String),
    /// Underlying I/O failure.
    Io(String),
    /// A computation produced NaN/Inf where finite values are required.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Consistency(m) => write!(f, "consistency error: {m}"),
            Error::Integrity(m) => write!(f, "integrity error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
