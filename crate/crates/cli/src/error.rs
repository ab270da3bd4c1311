use std::fmt;

use deepbet_core::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable, malformed or unsuitable input data (exit 2).
    Data(String),
    /// A bug or numerical breakdown (exit 3).
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    /// Same class, rewritten message.
    pub fn map(self, f: impl FnOnce(String) -> String) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(f(m)),
            CliError::Data(m) => CliError::Data(f(m)),
            CliError::Internal(m) => CliError::Internal(f(m)),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::InvalidConfig(_) => CliError::Usage(m),
            Error::NonFiniteLoss | Error::NonFiniteGradient(_) => CliError::Internal(m),
            _ => CliError::Data(m),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
