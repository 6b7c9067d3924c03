use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid frequency ladder: {0}")]
    Ladder(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("diffusion step {step} outside [1, {max}]")]
    StepOutOfRange { step: usize, max: usize },
    #[error("unknown task `{task}`; registered tasks: {registered}")]
    UnknownTask { task: String, registered: String },
    #[error("scripted expert for `{task}` failed {attempts} consecutive attempts")]
    RetryBudgetExhausted { task: String, attempts: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
