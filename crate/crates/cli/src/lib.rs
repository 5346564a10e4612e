//! Scenario runner: parses scenario files and runs the named experiments,
//! writing CSV and JSON artifacts.

pub mod experiments;
pub mod scenario;

use thiserror::Error;

pub use experiments::{run_experiment, Report, Summary};
pub use scenario::{Experiment, Scenario, TopologyRef};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad command line or unreadable input; exits with status 2.
    #[error("{0}")]
    Usage(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Topology(#[from] microsim::topology::TopologyError),
    #[error(transparent)]
    Workload(#[from] microsim::workload::WorkloadError),
    #[error(transparent)]
    Engine(#[from] microsim::EngineError),
    #[error(transparent)]
    Metrics(#[from] microsim::metrics::MetricsError),
    #[error(transparent)]
    Cost(#[from] microsim::management::CostError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Scenario(_) => 2,
            _ => 1,
        }
    }
}
