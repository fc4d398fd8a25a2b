//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes. The CLI maps each class to its own exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range. `field` names the offending key.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// A tensor or table does not have the expected shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// An id that does not exist in the world / manifest / table.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// A batch has no (or not enough) non-targeting control cells.
    #[error("missing controls: {0}")]
    MissingControls(String),

    /// Controls exist but their pooled statistics have zero variance.
    #[error("missing variance: {0}")]
    MissingVariance(String),

    /// API misuse, e.g. normalising an image with another batch's statistics.
    #[error("misuse: {0}")]
    Misuse(String),

    /// Aggregation over an empty set.
    #[error("empty set: {0}")]
    EmptySet(String),

    /// Non-finite values in a numerical pipeline.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Not enough rows for the requested operation.
    #[error("size error: {0}")]
    Size(String),

    /// A metric is undefined for the given input (e.g. recall against an empty truth set).
    #[error("undefined metric: {0}")]
    Undefined(String),

    /// Malformed file content.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Coarse failure class, used for process exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}
