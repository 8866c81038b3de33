use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Training { epoch: usize, loss: f64 },

    #[error("solver produced non-finite objective {value} at a = {point}")]
    Solver { point: f64, value: f64 },

    #[error("fixed-point overflow: {0}")]
    Range(String),

    #[error("parse error in {file} at byte {offset}: {message}")]
    Parse {
        file: String,
        offset: usize,
        message: String,
    },

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Dimension(_)
            | Error::Structure(_)
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Io { .. } => 2,
            Error::Domain(_)
            | Error::NonFinite { .. }
            | Error::Training { .. }
            | Error::Solver { .. }
            | Error::Range(_) => 3,
        }
    }
}
