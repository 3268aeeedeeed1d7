//! CLI error type and its mapping onto process exit codes.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Configuration problem: bad file, unknown key, invalid value.
pub const EXIT_CONFIG: i32 = 2;
/// Anything that failed while doing the work.
pub const EXIT_RUNTIME: i32 = 3;
/// Work finished but an ordinal verdict did not hold.
pub const EXIT_VERDICT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] sgtc::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{0}")]
    Runtime(String),

    #[error("{failed} of {total} ordinal verdicts failed")]
    Verdict { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(sgtc::Error::Config(_)) => EXIT_CONFIG,
            CliError::Verdict { .. } => EXIT_VERDICT,
            _ => EXIT_RUNTIME,
        }
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
