use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments violate an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Malformed or inconsistent data files.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite losses or degenerate training data.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Transport(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}
