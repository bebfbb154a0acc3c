//! IO layer and command implementations around `hifanet-core`: the binary
//! dataset format, parameter checkpoints, JSON run configs and the CSV
//! emitting commands the `hifanet` binary dispatches to.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or config values; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Broken or inconsistent data files; exit code 3.
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
        }
    }
}
