//! Configuration-driven experiment runner: single runs, FedAvg/FedDLR
//! comparisons, threshold sweeps and MAC reports.

pub mod config;
pub mod experiment;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] feddlr::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Run(_) | CliError::Io(_) => 2,
        }
    }
}
