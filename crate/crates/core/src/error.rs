use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("initialization error: block {block}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        block: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("training error in {stage} at iteration {iteration}: {reason}")]
    Training {
        stage: String,
        iteration: usize,
        reason: String,
    },

    #[error("inversion error at iteration {iteration}: {reason}")]
    Inversion { iteration: usize, reason: String },

    #[error("parse error in {file}: {field}: {reason}")]
    Parse {
        file: PathBuf,
        field: String,
        reason: String,
    },

    #[error("missing artifact {path}: run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parse(file: impl Into<PathBuf>, field: impl Into<String>, reason: impl ToString) -> Self {
        Error::Parse {
            file: file.into(),
            field: field.into(),
            reason: reason.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Validation(_) | Error::Parse { .. } => 3,
            Error::Usage(_) => 64,
            Error::Shape { .. } => 4,
            Error::Training { .. } | Error::Inversion { .. } => 5,
            Error::MissingArtifact { .. } => 6,
            Error::Io { .. } => 74,
        }
    }
}
