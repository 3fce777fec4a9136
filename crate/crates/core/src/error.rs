//! Crate-wide error type and result alias.
//!
//! One enum covers every failure class the engine can hit, so call sites can
//! bubble errors with `?` and the CLI can map each class onto a stable process
//! exit code ([`Error::exit_code`]).

use std::fmt;

/// Every error the engine can produce.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both offenders.
    Dimension(String),
    /// Invalid configuration value or combination of values.
    Config(String),
    /// Malformed input data (CSV cells, timestamps, orderings).
    Ingest {
        /// 1-based data row the problem was found on, when known.
        row: Option<usize>,
        msg: String,
    },
    /// A documented API precondition was violated (an internal misuse, not
    /// a data problem).
    Contract(String),
    /// A computation produced non-finite values where finite ones are
    /// required.
    Numeric(String),
    /// Corrupt, truncated, or version-incompatible serialized state.
    Persistence(String),
    /// Bad command-line invocation.
    Usage(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error class:
    /// 1 = usage/configuration, 2 = data, 3 = numeric/internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Ingest { .. } | Error::Io(_) | Error::Persistence(_) | Error::Dimension(_) => 2,
            Error::Numeric(_) | Error::Contract(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Ingest { row: Some(r), msg } => write!(f, "ingestion error at row {r}: {msg}"),
            Error::Ingest { row: None, msg } => write!(f, "ingestion error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Persistence(msg) => write!(f, "persistence error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
