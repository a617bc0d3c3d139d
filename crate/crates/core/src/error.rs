use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Each variant maps onto a stable, machine-parsable
/// class name (see [`Error::class`]) used by the command line front-end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("filter design error: {0}")]
    Design(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error at {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "ConfigError",
            Error::Shape(_) => "ShapeError",
            Error::Data(_) => "DataError",
            Error::Numeric(_) => "NumericError",
            Error::Design(_) => "DesignError",
            Error::Format(_) => "FormatError",
            Error::Io { .. } => "IoError",
            Error::Wav { .. } => "WavError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use shape_err;
