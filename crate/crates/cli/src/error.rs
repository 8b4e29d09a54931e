use std::process::ExitCode;

use thiserror::Error;

/// Failure of a subcommand, carrying the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or inputs that do not fit the model.
    #[error("{0}")]
    Usage(String),

    /// A property suite ran and reported a failure.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] melglow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }

    /// 0 success, 1 verification or numeric failure, 2 usage/config, 3 I/O.
    pub fn exit_code(&self) -> ExitCode {
        use melglow::Error as E;
        let code = match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::Io(_) | E::Format(_) | E::UnsupportedFormat(_) | E::Checkpoint(_) => 3,
                E::Config(_) | E::Shape(_) | E::EmptyInput(_) | E::InputTooShort(_) => 2,
                E::Numeric(_) | E::Inversion(_) => 1,
            },
        };
        ExitCode::from(code)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
