//! Configuration-driven runner for the `hyperpencil` experiments.

pub mod config;
pub mod plots;
pub mod run;

pub use config::{ExperimentConfig, ExperimentKind};
pub use plots::{emit_plots, PlotSpec};
pub use run::{run, run_with_threads, RunManifest, RunOutcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{task}: {source}")]
    Numeric {
        task: String,
        #[source]
        source: hyperpencil::Error,
    },
    #[error("io error: {0}")]
    Io(String),
    #[error("plot error: {0}")]
    Plot(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for everything that stopped a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric {
                source: hyperpencil::Error::Parameter(_),
                ..
            } => 2,
            _ => 3,
        }
    }
}
