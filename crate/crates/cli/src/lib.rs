//! Experiment runner: config parsing, training pipelines and artifacts.
//!
//! Every random stream is derived from the config's root seed by a fixed
//! label (see [`pipeline::Streams`]), so a rerun with the same config writes
//! byte-identical files.

pub mod config;
pub mod pipeline;

pub use config::{Experiment, ExperimentConfig};
pub use pipeline::{gradcheck, run, FitRow, RunReport, Streams, GRADCHECK_TOLERANCE};

use predplan::envs::RoundaboutError;
use predplan::models::ModelError;
use predplan::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{origin}:{line}: {msg}")]
    Parse {
        origin: String,
        /// 1-based; 0 when the problem is not tied to a line.
        line: usize,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("writing artifacts: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("gradient check failed: max relative error {max:e} > {tolerance:e}")]
    Gradcheck { max: f64, tolerance: f64 },
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Train(TrainError::Model(e))
    }
}

impl From<RoundaboutError> for CliError {
    fn from(e: RoundaboutError) -> Self {
        CliError::Train(TrainError::Env(e))
    }
}

impl CliError {
    /// 2 for anything the config is to blame for, 3 for numerical failures,
    /// 1 for I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse { .. } | CliError::Config(_) => 2,
            CliError::Io(_) => 1,
            CliError::Gradcheck { .. } => 3,
            CliError::Train(e) => match e {
                TrainError::Config(_) | TrainError::Env(_) => 2,
                TrainError::Model(ModelError::Spec(_) | ModelError::Dimension(_)) => 2,
                _ => 3,
            },
        }
    }
}
