//! Adaptive cruise control: keep a 1.5 s headway to a lead car whose
//! acceleration is hidden from the agent.
//!
//! State is `(v_target, v_host, x)`. The lead car's acceleration follows a
//! bounded random walk; only the lead speed is affected by it, so the
//! residual is non-zero in component 0 alone.

use crate::diff::{NodeId, Tape, TapeError};
use crate::rng::Seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::relu;

#[derive(Debug, Clone, PartialEq)]
pub struct AccConfig {
    /// Seconds between rounds.
    pub tau: f64,
    /// Bound on the lead car's hidden acceleration (m/s²).
    pub a_max_target: f64,
    /// Per-step increment bound of the lead acceleration random walk.
    pub target_jerk: f64,
    pub horizon: usize,
    pub v_target_range: (f64, f64),
    pub v_host_range: (f64, f64),
    pub gap_range: (f64, f64),
    /// Box used for uniform exploration and action normalisation.
    pub action_box: (f64, f64),
}

impl Default for AccConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            a_max_target: 3.0,
            target_jerk: 0.5,
            horizon: 100,
            v_target_range: (5.0, 25.0),
            v_host_range: (5.0, 25.0),
            gap_range: (10.0, 60.0),
            action_box: (-5.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccState {
    pub v_target: f64,
    pub v_host: f64,
    /// Host-to-target gap in metres.
    pub gap: f64,
}

impl AccState {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.v_target, self.v_host, self.gap]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            v_target: s[0],
            v_host: s[1],
            gap: s[2],
        }
    }
}

/// Desired gap `max{1, 1.5 v_host}`.
pub fn desired_gap(v_host: f64) -> f64 {
    (1.5 * v_host).max(1.0)
}

/// Headway ratio `x / x*`.
pub fn headway_ratio(s: AccState) -> f64 {
    s.gap / desired_gap(s.v_host)
}

/// `r = −(0.1|a| + [|x/x* − 1| − 0.3]_+)`.
pub fn acc_reward(s: AccState, a: f64) -> f64 {
    let smooth = 0.1 * a.abs();
    let ratio = s.gap / desired_gap(s.v_host);
    let band = relu((ratio + -1.0).abs() + -0.3);
    -(smooth + band)
}

/// Full dynamics given the lead car's acceleration.
pub fn acc_step(s: AccState, a: f64, a_target: f64, tau: f64) -> AccState {
    AccState {
        v_target: relu(s.v_target + tau * a_target),
        v_host: relu(s.v_host + tau * a),
        gap: relu(s.gap + tau * (s.v_target - s.v_host)),
    }
}

/// The part of the next state computable from `(s, a)`: the lead speed is
/// carried over unchanged.
pub fn acc_predictable(s: AccState, a: f64, tau: f64) -> AccState {
    AccState {
        v_target: s.v_target,
        v_host: relu(s.v_host + tau * a),
        gap: relu(s.gap + tau * (s.v_target - s.v_host)),
    }
}

pub(crate) fn predictable_node(
    tape: &mut Tape,
    s: NodeId,
    a: NodeId,
    tau: f64,
) -> Result<NodeId, TapeError> {
    let vt = tape.select(s, 0, 1)?;
    let vh = tape.select(s, 1, 1)?;
    let x = tape.select(s, 2, 1)?;
    let dv = tape.scale(tau, a)?;
    let vh_next = tape.add(vh, dv)?;
    let vh_next = tape.pospart(vh_next)?;
    let closing = tape.sub(vt, vh)?;
    let closing = tape.scale(tau, closing)?;
    let x_next = tape.add(x, closing)?;
    let x_next = tape.pospart(x_next)?;
    tape.concat(&[vt, vh_next, x_next])
}

pub(crate) fn reward_node(tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, TapeError> {
    let abs_a = tape.abs(a)?;
    let smooth = tape.scale(0.1, abs_a)?;
    let vh = tape.select(s, 1, 1)?;
    let x = tape.select(s, 2, 1)?;
    let xs = tape.scale(1.5, vh)?;
    let xs = tape.max_const(xs, 1.0)?;
    let ratio = tape.div(x, xs)?;
    let dev = tape.offset(ratio, -1.0)?;
    let dev = tape.abs(dev)?;
    let dev = tape.offset(dev, -0.3)?;
    let band = tape.pospart(dev)?;
    let total = tape.add(smooth, band)?;
    tape.scale(-1.0, total)
}

#[derive(Debug, Clone)]
pub struct AccEnv {
    cfg: AccConfig,
    state: AccState,
    a_target: f64,
    rng: ChaCha8Rng,
    t: usize,
}

impl AccEnv {
    /// Uniform initial state in the configured ranges; the hidden lead
    /// acceleration starts at 0.
    pub fn reset(seed: Seed, cfg: &AccConfig) -> Self {
        let mut rng = seed.rng();
        let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let state = AccState {
            v_target: draw(cfg.v_target_range),
            v_host: draw(cfg.v_host_range),
            gap: draw(cfg.gap_range),
        };
        Self {
            cfg: cfg.clone(),
            state,
            a_target: 0.0,
            rng,
            t: 0,
        }
    }

    pub fn state(&self) -> AccState {
        self.state
    }

    pub fn target_acceleration(&self) -> f64 {
        self.a_target
    }

    pub fn config(&self) -> &AccConfig {
        &self.cfg
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Advances one round; returns `(reward, next state)`.
    pub fn step(&mut self, a: f64) -> (f64, AccState) {
        let r = acc_reward(self.state, a);
        self.state = acc_step(self.state, a, self.a_target, self.cfg.tau);
        let jerk = self.cfg.target_jerk;
        let eta = -jerk + 2.0 * jerk * self.rng.random::<f64>();
        self.a_target = (self.a_target + eta).clamp(-self.cfg.a_max_target, self.cfg.a_max_target);
        self.t += 1;
        (r, self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn step_hand_evaluated() {
        let s = AccState {
            v_target: 10.0,
            v_host: 8.0,
            gap: 20.0,
        };
        let n = acc_step(s, 1.0, -2.0, 0.1);
        assert!(close(n.v_target, 9.8) && close(n.v_host, 8.1) && close(n.gap, 20.2));
        let p = acc_predictable(s, 1.0, 0.1);
        assert!(close(p.v_target, 10.0) && close(p.v_host, 8.1) && close(p.gap, 20.2));
        assert!(close(n.v_target - p.v_target, -0.2));
        assert_eq!(n.v_host, p.v_host);
        assert_eq!(n.gap, p.gap);
    }

    #[test]
    fn step_clamps_at_zero() {
        let s = AccState {
            v_target: 0.0,
            v_host: 0.0,
            gap: 5.0,
        };
        assert_eq!(acc_step(s, -1.0, 0.0, 0.1), s);
    }

    #[test]
    fn predictable_fixed_point() {
        let s = AccState {
            v_target: 12.0,
            v_host: 12.0,
            gap: 30.0,
        };
        assert_eq!(acc_predictable(s, 0.0, 0.1), s);
    }

    #[test]
    fn reward_hand_evaluated() {
        let s = AccState {
            v_target: 10.0,
            v_host: 10.0,
            gap: 15.0,
        };
        assert_eq!(acc_reward(s, 0.0), 0.0);
        let s = AccState { gap: 21.0, ..s };
        assert!(close(acc_reward(s, 0.5), -0.15));
    }

    #[test]
    fn reward_zero_inside_band() {
        for i in 1..60 {
            let ratio = 0.7 + 0.01 * i as f64;
            let s = AccState {
                v_target: 5.0,
                v_host: 8.0,
                gap: ratio * 12.0,
            };
            assert_eq!(acc_reward(s, 0.0), 0.0, "ratio {ratio}");
        }
    }

    #[test]
    fn desired_gap_at_least_one() {
        for v in [0.0, 0.1, 0.5, 2.0 / 3.0, 1.0, 30.0] {
            assert!(desired_gap(v) >= 1.0);
        }
    }

    #[test]
    fn tape_nodes_match_numeric() {
        let s = AccState {
            v_target: 11.3,
            v_host: 9.7,
            gap: 25.1,
        };
        for a in [-3.2, 0.0, 0.7, 4.4] {
            let mut t = Tape::new();
            let sn = t.leaf_blocked(&s.to_vec());
            let an = t.leaf_blocked(&[a]);
            let p = predictable_node(&mut t, sn, an, 0.1).unwrap();
            assert_eq!(t.value(p), acc_predictable(s, a, 0.1).to_vec().as_slice());
            let r = reward_node(&mut t, sn, an).unwrap();
            assert_eq!(t.scalar(r), acc_reward(s, a));
        }
    }

    #[test]
    fn reset_deterministic_and_in_range() {
        let cfg = AccConfig::default();
        assert_eq!(
            AccEnv::reset(Seed(1), &cfg).state(),
            AccEnv::reset(Seed(1), &cfg).state()
        );
        assert_ne!(
            AccEnv::reset(Seed(1), &cfg).state(),
            AccEnv::reset(Seed(2), &cfg).state()
        );
        for i in 0..10_000 {
            let s = AccEnv::reset(Seed(i), &cfg).state();
            assert!((5.0..=25.0).contains(&s.v_target));
            assert!((5.0..=25.0).contains(&s.v_host));
            assert!((10.0..=60.0).contains(&s.gap));
        }
    }
}
