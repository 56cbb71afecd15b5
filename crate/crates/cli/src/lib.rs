//! Experiment runner: configs, presets, execution and aggregation.

pub mod aggregate;
pub mod config;
pub mod presets;
pub mod runner;
pub mod svg;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failure: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}
