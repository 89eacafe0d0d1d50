//! Experiment drivers behind the `tddc` command line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;

use thiserror::Error;

pub use config::{ExperimentConfig, MonteCarloConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("physics: {0}")]
    Physics(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Physics(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Io(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<tddc_core::NodeError> for CliError {
    fn from(e: tddc_core::NodeError) -> Self {
        use tddc_core::NodeError;
        match e {
            NodeError::InvalidParams(_) => CliError::Config(e.to_string()),
            NodeError::Physics(tddc_core::PhysicsError::InvalidArgument(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Physics(e.to_string()),
        }
    }
}

impl From<tddc_core::StationError> for CliError {
    fn from(e: tddc_core::StationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<tddc_core::PhysicsError> for CliError {
    fn from(e: tddc_core::PhysicsError) -> Self {
        match e {
            tddc_core::PhysicsError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Physics(e.to_string()),
        }
    }
}

impl From<tddc_core::WireError> for CliError {
    fn from(e: tddc_core::WireError) -> Self {
        CliError::Config(e.to_string())
    }
}
