//! Long-horizon policy learning by short-term prediction.
//!
//! A policy network is unrolled together with a next-state predictor and a
//! reward model over a whole episode. The part of the next state the
//! predictor cannot explain is supplied by the simulator as a constant
//! residual, so the forward pass follows the real trajectory while gradients
//! flow only through the differentiable predictions. The policy is then
//! trained by backpropagation through time.
//!
//! * [`diff`]: reverse-mode tape, parameter vectors, finite differences.
//! * [`envs`]: adaptive cruise control, the adversarial line game and the
//!   roundabout merge, each with its analytic predictable part.
//! * [`models`]: MLPs, datasets, regression fitting and checkpoints.
//! * [`trainer`]: unrolling, BPTT gradients, training loops and evaluation.

pub mod diff;
pub mod envs;
pub mod models;
pub mod rng;
pub mod trainer;

pub use rng::Seed;
