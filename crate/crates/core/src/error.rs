use alloc::string::String;
use core::fmt;

/// Errors raised by the core routines.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A parameter lies outside its admissible box.
    Domain(String),
    /// Malformed input (NaN, point outside the root box, empty cluster, ...).
    Input(String),
    /// Vector or matrix sizes do not fit together.
    Dimension { expected: usize, found: usize },
    /// A dense materialization would exceed the size guard.
    TooLarge { entries: usize, limit: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Dimension { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::TooLarge { entries, limit } => {
                write!(f, "refusing to materialize {entries} entries (limit {limit})")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { expected, found })
    }
}
