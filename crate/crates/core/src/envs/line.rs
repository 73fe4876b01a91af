//! One-dimensional game against an adversarial residual.
//!
//! `s' = s + a + ν` with `|ν| ≤ 0.5` chosen by the environment, loss
//! `0.1|a| + [|s| − 2]_+`. The adversary pushes the state away from the
//! origin: `ν = 0.5·sign(s + a)`, with `+0.5` on a tie.

use crate::diff::{NodeId, Tape, TapeError};
use crate::rng::Seed;
use rand::Rng;

use super::relu;

#[derive(Debug, Clone, PartialEq)]
pub struct LineConfig {
    pub horizon: usize,
    pub nu_bound: f64,
    pub init_range: (f64, f64),
    pub action_box: (f64, f64),
}

impl Default for LineConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            nu_bound: 0.5,
            init_range: (-2.0, 2.0),
            action_box: (-2.0, 2.0),
        }
    }
}

pub fn line_loss(s: f64, a: f64) -> f64 {
    0.1 * a.abs() + relu(s.abs() + -2.0)
}

pub fn line_adversary(s: f64, a: f64, bound: f64) -> f64 {
    if s + a < 0.0 {
        -bound
    } else {
        bound
    }
}

/// Returns `(loss, s_next, ν)`.
pub fn line_step(s: f64, a: f64) -> (f64, f64, f64) {
    let nu = line_adversary(s, a, 0.5);
    (line_loss(s, a), line_predictable(s, a) + nu, nu)
}

pub fn line_predictable(s: f64, a: f64) -> f64 {
    s + a
}

/// `a* = −[s − 1.5]_+ + [−s − 1.5]_+`.
pub fn line_optimal_action(s: f64) -> f64 {
    -relu(s - 1.5) + relu(-s - 1.5)
}

pub(crate) fn predictable_node(tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, TapeError> {
    tape.add(s, a)
}

pub(crate) fn reward_node(tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, TapeError> {
    let abs_a = tape.abs(a)?;
    let smooth = tape.scale(0.1, abs_a)?;
    let m = tape.abs(s)?;
    let m = tape.offset(m, -2.0)?;
    let out = tape.pospart(m)?;
    let loss = tape.add(smooth, out)?;
    tape.scale(-1.0, loss)
}

#[derive(Debug, Clone)]
pub struct LineEnv {
    cfg: LineConfig,
    s: f64,
    t: usize,
}

impl LineEnv {
    pub fn reset(seed: Seed, cfg: &LineConfig) -> Self {
        let (lo, hi) = cfg.init_range;
        let s = lo + (hi - lo) * seed.rng().random::<f64>();
        Self::from_state(s, cfg)
    }

    pub fn from_state(s: f64, cfg: &LineConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            s,
            t: 0,
        }
    }

    pub fn state(&self) -> f64 {
        self.s
    }

    pub fn config(&self) -> &LineConfig {
        &self.cfg
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Advances one round; returns `(reward, s_next, ν)` with reward = −loss.
    pub fn step(&mut self, a: f64) -> (f64, f64, f64) {
        let loss = line_loss(self.s, a);
        let nu = line_adversary(self.s, a, self.cfg.nu_bound);
        self.s = line_predictable(self.s, a) + nu;
        self.t += 1;
        (-loss, self.s, nu)
    }
}
