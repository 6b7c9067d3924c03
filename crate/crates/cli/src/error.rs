use std::process::ExitCode;

/// Failures split by who has to fix them: exit code 1 for the user, 2 for us.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::User(_) => ExitCode::from(1),
            CliError::Internal(_) => ExitCode::from(2),
        }
    }

    pub fn io(context: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::User(format!("{context}: {e}"))
    }
}

impl From<multichunk::Error> for CliError {
    fn from(e: multichunk::Error) -> Self {
        use multichunk::Error as E;
        match e {
            E::InvalidArgument(_) | E::UnknownTask { .. } | E::Ladder(_) | E::Format { .. } | E::Io { .. } => {
                CliError::User(e.to_string())
            }
            E::Shape(_) | E::StepOutOfRange { .. } | E::RetryBudgetExhausted { .. } | E::NonFinite(_) | E::Json(_) => {
                CliError::Internal(e.to_string())
            }
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
