use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 usage, 2 data, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Argument(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Num(NumError::Usage(_) | NumError::Argument(_)) => 1,
            Error::Num(_) | Error::Numeric(_) | Error::MissingParam(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
