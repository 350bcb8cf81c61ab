use std::path::PathBuf;

/// Errors produced anywhere in the grading pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("kappa is undefined: {0}")]
    UndefinedKappa(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("failed to read image {path}: {message}")]
    Ingestion { path: PathBuf, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, config, data) as
    /// opposed to failures while running.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Shape(_) | Error::Config(_) | Error::Validation(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
