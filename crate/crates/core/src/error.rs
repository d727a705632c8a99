use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid shapes, hyperparameters or architecture settings.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or insufficient data.
    #[error("data error: {0}")]
    Data(String),
    /// An operation was requested on state that cannot support it.
    #[error("state error: {0}")]
    State(String),
    /// API misuse, e.g. seeding backward from a non-scalar node.
    #[error("usage error: {0}")]
    Usage(String),
    /// Binary file failed validation.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    /// Numerical failure during optimization.
    #[error("training error: {0}")]
    Training(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Format { .. } | Error::Usage(_)
        )
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use data_err;
