//! CLI errors and their exit codes.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    /// `key` is `section.key`, or `line N` for syntax errors.
    #[error("config error at {key}: {message}")]
    Config { key: String, message: String },

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Core(astra_tda::Error),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        CliError::MissingArtifact {
            path: path.into(),
            hint: hint.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::MissingArtifact { .. } => EXIT_MISSING_ARTIFACT,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            _ => EXIT_OTHER,
        }
    }
}

impl From<astra_tda::Error> for CliError {
    fn from(e: astra_tda::Error) -> Self {
        match e {
            astra_tda::Error::Divergence { .. } | astra_tda::Error::TrainingDivergence { .. } => {
                CliError::Divergence(e.to_string())
            }
            other => CliError::Core(other),
        }
    }
}
