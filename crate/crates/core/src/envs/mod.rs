//! Seeded simulators with an analytic predictable part.
//!
//! Every environment exposes its step dynamics, a numeric and a tape version
//! of the predictable next state `ŝ = f(s, a)`, and the reward. The residual
//! handed to the learner is `ν = s' − ŝ`.

pub mod acc;
pub mod line;
pub mod roundabout;

mod record;

pub use acc::{AccConfig, AccEnv, AccState};
pub use line::{LineConfig, LineEnv};
pub use record::{residual, write_trajectory_csv, StepRecord};
pub use roundabout::{
    DriverType, Outcome, RoundaboutConfig, RoundaboutEnv, RoundaboutError, RoundaboutState,
};

use crate::diff::{NodeId, Tape, TapeError};
use crate::rng::Seed;

/// `[x]_+`, written exactly like the tape's relu so both paths agree bitwise.
#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Acc,
    Line,
    Roundabout,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Acc => "acc",
            EnvKind::Line => "line",
            EnvKind::Roundabout => "roundabout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvConfig {
    Acc(AccConfig),
    Line(LineConfig),
    Roundabout(RoundaboutConfig),
}

/// Fixed affine scaling of a vector to roughly `[-1, 1]`:
/// `(x − center) · inv_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaling {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl Scaling {
    pub fn new(center: Vec<f64>, half_width: Vec<f64>) -> Self {
        assert_eq!(center.len(), half_width.len());
        Self { center, half_width }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(vec![0.0; n], vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    pub fn concat(&self, other: &Scaling) -> Scaling {
        Scaling::new(
            [self.center.as_slice(), &other.center].concat(),
            [self.half_width.as_slice(), &other.half_width].concat(),
        )
    }
}

impl EnvConfig {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Acc(_) => EnvKind::Acc,
            EnvConfig::Line(_) => EnvKind::Line,
            EnvConfig::Roundabout(_) => EnvKind::Roundabout,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvConfig::Acc(_) => 3,
            EnvConfig::Line(_) => 1,
            EnvConfig::Roundabout(c) => c.state_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvConfig::Acc(c) => c.horizon,
            EnvConfig::Line(c) => c.horizon,
            EnvConfig::Roundabout(c) => c.horizon,
        }
    }

    pub fn action_box(&self) -> (f64, f64) {
        match self {
            EnvConfig::Acc(c) => c.action_box,
            EnvConfig::Line(c) => c.action_box,
            EnvConfig::Roundabout(c) => (-c.a_max, c.a_max),
        }
    }

    pub fn state_scaling(&self) -> Scaling {
        match self {
            EnvConfig::Acc(c) => {
                let v_hi = c.v_target_range.1.max(c.v_host_range.1) + 5.0;
                let x_hi = c.gap_range.1 + 10.0;
                Scaling::new(
                    vec![v_hi / 2.0, v_hi / 2.0, x_hi / 2.0],
                    vec![v_hi / 2.0, v_hi / 2.0, x_hi / 2.0],
                )
            }
            EnvConfig::Line(_) => Scaling::new(vec![0.0], vec![3.0]),
            EnvConfig::Roundabout(c) => {
                let span = c.exit_distance.max(-c.host_start.0).max(-c.target_span.0);
                let v_mid = (c.target_speed.1 + 1.0) / 2.0;
                let mut center = vec![0.0, v_mid];
                let mut hw = vec![span, v_mid];
                for _ in 0..c.n_targets {
                    center.extend([0.0, v_mid, 0.0]);
                    hw.extend([span, v_mid, c.a_max]);
                }
                Scaling::new(center, hw)
            }
        }
    }

    /// Typical magnitude of a one-step state change, per component. Used to
    /// scale the output of residual-form next-state predictors.
    pub fn step_scaling(&self) -> Scaling {
        match self {
            EnvConfig::Acc(c) => {
                let a_host = c.action_box.0.abs().max(c.action_box.1.abs());
                let v_hi = c.v_target_range.1.max(c.v_host_range.1) + 5.0;
                Scaling::new(
                    vec![0.0; 3],
                    vec![c.tau * c.a_max_target, c.tau * a_host, c.tau * v_hi],
                )
            }
            EnvConfig::Line(_) => Scaling::new(vec![0.0], vec![1.0]),
            EnvConfig::Roundabout(c) => {
                let mut hw = vec![c.tau * (c.target_speed.1 + 1.0), c.tau * c.a_max];
                for _ in 0..c.n_targets {
                    hw.extend([c.tau * c.target_speed.1, c.tau * c.a_max, c.tau * c.a_max]);
                }
                Scaling::new(vec![0.0; hw.len()], hw)
            }
        }
    }

    pub fn action_scaling(&self) -> Scaling {
        let (lo, hi) = self.action_box();
        Scaling::new(vec![(lo + hi) / 2.0], vec![(hi - lo) / 2.0])
    }

    pub fn reset(&self, seed: Seed) -> Result<Env, RoundaboutError> {
        Ok(match self {
            EnvConfig::Acc(c) => Env::Acc(AccEnv::reset(seed, c)),
            EnvConfig::Line(c) => Env::Line(LineEnv::reset(seed, c)),
            EnvConfig::Roundabout(c) => Env::Roundabout(RoundaboutEnv::reset(seed, c)?),
        })
    }

    pub fn predictable(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            EnvConfig::Acc(c) => {
                acc::acc_predictable(AccState::from_slice(s), a[0], c.tau).to_vec()
            }
            EnvConfig::Line(_) => vec![line::line_predictable(s[0], a[0])],
            EnvConfig::Roundabout(c) => roundabout::round_predictable(s, a[0], c),
        }
    }

    pub fn predictable_node(
        &self,
        tape: &mut Tape,
        s: NodeId,
        a: NodeId,
    ) -> Result<NodeId, TapeError> {
        match self {
            EnvConfig::Acc(c) => acc::predictable_node(tape, s, a, c.tau),
            EnvConfig::Line(_) => line::predictable_node(tape, s, a),
            EnvConfig::Roundabout(c) => roundabout::predictable_node(tape, s, a, c),
        }
    }

    /// Differentiable reward at `(s, a)`. Equal to the step reward for ACC and
    /// the line game; the roundabout adds discrete event terms on top.
    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        match self {
            EnvConfig::Acc(_) => acc::acc_reward(AccState::from_slice(s), a[0]),
            EnvConfig::Line(_) => -line::line_loss(s[0], a[0]),
            EnvConfig::Roundabout(c) => roundabout::round_shaped_reward(s, a[0], c),
        }
    }

    pub fn reward_node(&self, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, TapeError> {
        match self {
            EnvConfig::Acc(_) => acc::reward_node(tape, s, a),
            EnvConfig::Line(_) => line::reward_node(tape, s, a),
            EnvConfig::Roundabout(c) => roundabout::reward_node(tape, s, a, c),
        }
    }
}

/// One simulator transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub reward: f64,
    /// Non-differentiable part of `reward` (zero except roundabout events).
    pub event_reward: f64,
    pub next: Vec<f64>,
    pub done: bool,
    pub outcome: Option<Outcome>,
}

/// A running environment instance.
#[derive(Debug, Clone)]
pub enum Env {
    Acc(AccEnv),
    Line(LineEnv),
    Roundabout(RoundaboutEnv),
}

impl Env {
    pub fn state(&self) -> Vec<f64> {
        match self {
            Env::Acc(e) => e.state().to_vec(),
            Env::Line(e) => vec![e.state()],
            Env::Roundabout(e) => e.observe(),
        }
    }

    pub fn t(&self) -> usize {
        match self {
            Env::Acc(e) => e.t(),
            Env::Line(e) => e.t(),
            Env::Roundabout(e) => e.t(),
        }
    }

    pub fn step(&mut self, a: &[f64]) -> Transition {
        match self {
            Env::Acc(e) => {
                let (reward, next) = e.step(a[0]);
                let horizon_hit = e.t() >= e.config().horizon;
                Transition {
                    reward,
                    event_reward: 0.0,
                    next: next.to_vec(),
                    done: horizon_hit,
                    outcome: horizon_hit.then_some(Outcome::Timeout),
                }
            }
            Env::Line(e) => {
                let (reward, next, _) = e.step(a[0]);
                let horizon_hit = e.t() >= e.config().horizon;
                Transition {
                    reward,
                    event_reward: 0.0,
                    next: vec![next],
                    done: horizon_hit,
                    outcome: horizon_hit.then_some(Outcome::Timeout),
                }
            }
            Env::Roundabout(e) => {
                let s = e.step(a[0]);
                Transition {
                    reward: s.reward,
                    event_reward: s.event_reward,
                    next: s.next,
                    done: s.done,
                    outcome: s.outcome,
                }
            }
        }
    }
}
