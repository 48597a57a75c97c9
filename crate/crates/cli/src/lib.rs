//! Experiment runner: configuration, run manifests and the `train`, `eval`,
//! `figures` and `ablation` commands.

pub mod commands;
pub mod config;
pub mod manifest;

use std::process::ExitCode;

/// Command failure, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}

impl From<icp_core::Error> for CliError {
    fn from(e: icp_core::Error) -> Self {
        use icp_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config { .. } | E::Generation(_) => CliError::Config(msg),
            E::Divergence { .. } => CliError::Divergence(msg),
            E::Io { .. } | E::Checkpoint { .. } | E::Ingestion(_) => CliError::Io(msg),
            E::Contract(_) => CliError::Failed(msg),
        }
    }
}
