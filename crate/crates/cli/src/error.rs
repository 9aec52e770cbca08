use std::path::PathBuf;

use hmm_vrso::HmmError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {message}")]
    BadInput { path: PathBuf, message: String },

    #[error(transparent)]
    Model(#[from] HmmError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Invalid(msg.into())
    }

    pub fn bad_input(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        CliError::BadInput { path: path.into(), message: msg.to_string() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for anything the user can fix by changing inputs, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) | CliError::BadInput { .. } => 2,
            CliError::Model(HmmError::Config(_) | HmmError::Dimension { .. }) => 2,
            CliError::Model(_) | CliError::Io { .. } | CliError::Runtime(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
