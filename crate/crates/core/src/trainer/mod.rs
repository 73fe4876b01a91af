//! Unrolling policy and predictors into one differentiable episode, BPTT,
//! training loops and evaluation.

mod eval;
mod gradcheck;
mod optim;
pub mod scenarios;
mod train;
mod unroll;

pub use eval::{evaluate, rollout, summarize, EpisodeResult, Metrics};
pub use gradcheck::{
    gradcheck_suite, gradcheck_suite_with_fault, gradient_check, random_params, GradcheckResult,
    GradcheckSummary,
};
pub use optim::Ascent;
pub use train::{
    init_params, policy_gradient, train_joint, train_policy, CurveRow, EvalHook, PolicyGradient,
    TrainConfig, TrainOutcome,
};
pub use unroll::{
    episode_env, replay_objective, replay_objective_split, unroll_episode, ActionNoise,
    ModelSource, Params, Replay, ReplayStep, Residuals, Trainable, UnrollConfig, Unrolled,
};

use crate::diff::TapeError;
use crate::envs::RoundaboutError;
use crate::models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] RoundaboutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("non-finite gradient (first at step {step:?})")]
    NonFiniteGradient { step: Option<usize> },
    #[error("training diverged at episode {episode} (step {step:?})")]
    Divergence { episode: usize, step: Option<usize> },
}
