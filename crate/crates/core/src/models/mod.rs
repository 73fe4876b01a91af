//! Policy and predictor networks, data collection and supervised fitting.

mod checkpoint;
mod data;
mod fit;
mod mlp;
mod net;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string};
pub use data::{
    collect, CollectInfo, Controller, Dataset, Exploration, FnPolicy, NetPolicy, Rollouts,
    UniformPolicy, ZeroPolicy,
};
pub use fit::{fit_regression, fit_regression_from, mse, FitConfig, FitReport};
pub use mlp::{mlp_eval, mlp_forward, mlp_init, MlpNodes, MlpSpec};
pub use net::{predict_next, predict_reward, NetSpec, OutputMap};

use crate::diff::TapeError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tape(TapeError),
}
