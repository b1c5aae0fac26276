use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] lowrank_core::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv output {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// 2 for configuration and input problems, 3 for numerical failures,
    /// 4 when a verification check does not hold.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Verification(_) => 4,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
