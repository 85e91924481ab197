use std::path::PathBuf;

use crate::runtime::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("session error: {0}")]
    Session(String),
    #[error("privacy budget exhausted: {0}")]
    BudgetExhausted(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
