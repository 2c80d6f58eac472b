//! Configuration-driven experiment pipeline behind the `layerprune` binary.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

/// Failures mapped to process exit codes by [`CliError::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing dependency: expected {}", .0.display())]
    Missing(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(layerprune::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

impl From<layerprune::Error> for CliError {
    fn from(e: layerprune::Error) -> Self {
        match e {
            layerprune::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing(_) => 2,
            CliError::Config(_) => 3,
            _ => 1,
        }
    }
}
