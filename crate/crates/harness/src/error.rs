use std::io;
use std::path::PathBuf;

use thiserror::Error;

use tfdp_core::config::ConfigError;
use tfdp_core::policy::PolicyError;
use tfdp_core::simenv::SimError;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad flags or configuration values.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Data(String),
}

impl HarnessError {
    /// 1 for usage and configuration problems, 2 for anything wrong with
    /// the data: missing or corrupt files, scene-hash mismatches, failed
    /// training.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Config(_) => 1,
            HarnessError::Sim(SimError::Config(_)) => 1,
            _ => 2,
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::File { path, source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
