//! Crate-wide error type.

use std::fmt;

/// Everything that can go wrong across the tensor, data, model and
/// training layers. Variants map onto the CLI exit codes: `Config` is a
/// usage error, `Data`/`Shape`/`Metric` are data errors, `Numeric` is a
/// numeric failure.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape contract violation; the message names the offending shapes.
    Shape(String),
    /// Malformed input data (bad label, ragged record, unknown token file).
    Data(String),
    /// Bad configuration value or flag combination.
    Config(String),
    /// Metric undefined for the given inputs (e.g. single-class AUC).
    Metric(String),
    /// Non-finite loss or a failed gradient check.
    Numeric(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Metric(m) => write!(f, "metric error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
