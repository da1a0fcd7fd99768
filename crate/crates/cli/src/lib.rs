//! Command-line front end: dataset generation, training, evaluation, sweeps
//! and benchmarks. Every CSV written here has a header row and a JSON
//! sidecar of the same stem recording the resolved configuration.

pub mod args;
pub mod commands;
pub mod config;

use la2former::bench::BenchError;
use la2former::data::DataError;
use la2former::model::ModelError;
use la2former::training::TrainError;
use thiserror::Error;

pub use args::Cli;
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for bad arguments, configs or inputs; 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        let usage = match self {
            Self::Usage(_) => true,
            Self::Data(e) => matches!(e, DataError::InvalidArgument(_) | DataError::Malformed(_)),
            Self::Model(e) => matches!(e, ModelError::Config(_) | ModelError::Format(_)),
            Self::Train(e) => matches!(
                e,
                TrainError::Config(_) | TrainError::Mismatch(_) | TrainError::Model(ModelError::Config(_))
            ),
            Self::Bench(e) => matches!(e, BenchError::InvalidCase(_) | BenchError::MemoryCap { .. }),
            Self::Io { .. } => false,
        };
        if usage {
            2
        } else {
            1
        }
    }
}
