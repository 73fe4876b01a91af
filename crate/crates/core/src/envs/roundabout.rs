//! Merging into a roundabout with aggressive and defensive drivers.
//!
//! The host drives along its own 1-D curve and the targets along the
//! roundabout curve; both curves share their origin at the merge point.
//! Positions are arc lengths (negative before the merge point). The host
//! leaves at the second exit, `exit_distance` metres past the merge.
//!
//! Observable state, in order:
//! `[p_host, v_host, p_1, v_1, acc_1, …, p_N, v_N, acc_N]`.
//! Driver types never appear in it; a target's type shows only through its
//! acceleration once the host is close to the merge point.
//!
//! Each step integrates positions with the current velocities and
//! velocities with the current accelerations (host: the clamped action),
//! then the targets pick their next accelerations. Everything except those
//! new accelerations is therefore predictable from `(s, a)`.

use crate::diff::{NodeId, Tape, TapeError};
use crate::rng::Seed;
use rand::Rng;
use thiserror::Error;

use super::relu;

pub const HOST_DIM: usize = 2;
pub const TARGET_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DriverType {
    /// Speeds up when the host tries to merge in front of it.
    Aggressive,
    /// Slows down and lets the host in.
    Defensive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Exit,
    Violation,
    Timeout,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoundaboutError {
    #[error("could not place {n} targets with {spacing} m spacing after {tries} tries")]
    Placement {
        n: usize,
        spacing: f64,
        tries: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundaboutConfig {
    pub n_targets: usize,
    pub p_aggressive: f64,
    pub tau: f64,
    /// Bound on every vehicle's |acceleration|.
    pub a_max: f64,
    pub horizon: usize,
    pub exit_distance: f64,
    /// Host and a target both this close to the merge point is a violation.
    pub conflict_radius: f64,
    /// Time headway (s) required behind any vehicle on the roundabout.
    pub headway: f64,
    pub host_start: (f64, f64),
    pub host_speed: (f64, f64),
    pub target_span: (f64, f64),
    pub target_speed: (f64, f64),
    pub min_spacing: f64,
    pub placement_tries: usize,
    /// Proportional gain of cruise-speed tracking.
    pub tracking_gain: f64,
    /// Targets react while the host is this close to the merge point...
    pub host_window: f64,
    /// ...and the target is at most this far upstream of it.
    pub target_window: f64,
    pub smoothness_weight: f64,
    pub time_cost: f64,
    pub violation_penalty: f64,
    pub exit_bonus: f64,
    /// Cost per second per metre still to go before the exit.
    pub distance_weight: f64,
    /// Radius (in |p_host| + |p_target|) of the soft merge-conflict penalty.
    pub caution_radius: f64,
    /// Extra metres on top of the headway in the soft gap penalty.
    pub gap_margin: f64,
    /// Distance before the merge point over which the gap penalty ramps in.
    pub merge_ramp: f64,
    pub safety_weight: f64,
}

impl Default for RoundaboutConfig {
    fn default() -> Self {
        Self {
            n_targets: 3,
            p_aggressive: 0.5,
            tau: 0.1,
            a_max: 3.0,
            horizon: 250,
            exit_distance: 40.0,
            conflict_radius: 2.0,
            headway: 1.5,
            host_start: (-40.0, -30.0),
            host_speed: (0.0, 2.0),
            target_span: (-60.0, 15.0),
            target_speed: (6.0, 9.0),
            min_spacing: 10.0,
            placement_tries: 1000,
            tracking_gain: 0.5,
            host_window: 15.0,
            target_window: 20.0,
            smoothness_weight: 0.1,
            time_cost: 0.01,
            violation_penalty: 10.0,
            exit_bonus: 1.0,
            distance_weight: 0.01,
            caution_radius: 8.0,
            gap_margin: 2.0,
            merge_ramp: 10.0,
            safety_weight: 1.0,
        }
    }
}

impl RoundaboutConfig {
    pub fn state_dim(&self) -> usize {
        HOST_DIM + TARGET_DIM * self.n_targets
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    /// Cruise speed the driver tracks.
    pub cruise: f64,
    pub driver: DriverType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundaboutState {
    pub host_position: f64,
    pub host_velocity: f64,
    pub targets: Vec<Target>,
}

impl RoundaboutState {
    /// Observable vector; driver types and cruise speeds are left out.
    pub fn observe(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(HOST_DIM + TARGET_DIM * self.targets.len());
        v.push(self.host_position);
        v.push(self.host_velocity);
        for t in &self.targets {
            v.extend([t.position, t.velocity, t.acceleration]);
        }
        v
    }
}

/// Integrates positions and velocities, carrying target accelerations over.
pub fn round_predictable(s: &[f64], a: f64, cfg: &RoundaboutConfig) -> Vec<f64> {
    let tau = cfg.tau;
    let mut out = Vec::with_capacity(s.len());
    out.push(s[0] + tau * s[1]);
    out.push(relu(s[1] + tau * a.clamp(-cfg.a_max, cfg.a_max)));
    for t in s[HOST_DIM..].chunks(TARGET_DIM) {
        out.push(t[0] + tau * t[1]);
        out.push(relu(t[1] + tau * t[2]));
        out.push(t[2]);
    }
    out
}

pub(crate) fn predictable_node(
    tape: &mut Tape,
    s: NodeId,
    a: NodeId,
    cfg: &RoundaboutConfig,
) -> Result<NodeId, TapeError> {
    let tau = cfg.tau;
    let n = (tape.value(s).len() - HOST_DIM) / TARGET_DIM;
    let mut parts = Vec::with_capacity(HOST_DIM + TARGET_DIM * n);
    let p = tape.select(s, 0, 1)?;
    let v = tape.select(s, 1, 1)?;
    let dp = tape.scale(tau, v)?;
    parts.push(tape.add(p, dp)?);
    let acc = tape.clamp(a, -cfg.a_max, cfg.a_max)?;
    let dv = tape.scale(tau, acc)?;
    let v_next = tape.add(v, dv)?;
    parts.push(tape.pospart(v_next)?);
    for i in 0..n {
        let base = HOST_DIM + TARGET_DIM * i;
        let p = tape.select(s, base, 1)?;
        let v = tape.select(s, base + 1, 1)?;
        let acc = tape.select(s, base + 2, 1)?;
        let dp = tape.scale(tau, v)?;
        parts.push(tape.add(p, dp)?);
        let dv = tape.scale(tau, acc)?;
        let v_next = tape.add(v, dv)?;
        parts.push(tape.pospart(v_next)?);
        parts.push(acc);
    }
    tape.concat(&parts)
}

/// Differentiable part of the reward at `(s, a)`: smoothness, time cost,
/// remaining distance and the soft safety penalties. The discrete violation/exit terms
/// are added by [`RoundaboutEnv::step`].
pub fn round_shaped_reward(s: &[f64], a: f64, cfg: &RoundaboutConfig) -> f64 {
    let (ph, vh) = (s[0], s[1]);
    let remaining = (cfg.distance_weight * cfg.tau) * relu(-ph + cfg.exit_distance);
    let ramp = ((1.0 / cfg.merge_ramp) * (ph + cfg.merge_ramp)).clamp(0.0, 1.0);
    let mut penalty = 0.0;
    for t in s[HOST_DIM..].chunks(TARGET_DIM) {
        let (pt, vt) = (t[0], t[1]);
        let conflict = relu(-(ph.abs() + pt.abs()) + cfg.caution_radius);
        let deficit = if pt >= ph {
            relu((cfg.headway * vh + cfg.gap_margin) - (pt - ph))
        } else {
            relu((cfg.headway * vt + cfg.gap_margin) - (ph - pt))
        };
        penalty += conflict + ramp * deficit;
    }
    let cost = (cfg.smoothness_weight * a.abs() + cfg.time_cost) + cfg.safety_weight * penalty;
    -(cost + remaining)
}

pub(crate) fn reward_node(
    tape: &mut Tape,
    s: NodeId,
    a: NodeId,
    cfg: &RoundaboutConfig,
) -> Result<NodeId, TapeError> {
    let n = (tape.value(s).len() - HOST_DIM) / TARGET_DIM;
    let ph = tape.select(s, 0, 1)?;
    let vh = tape.select(s, 1, 1)?;
    let to_go = tape.scale(-1.0, ph)?;
    let to_go = tape.offset(to_go, cfg.exit_distance)?;
    let to_go = tape.pospart(to_go)?;
    let remaining = tape.scale(cfg.distance_weight * cfg.tau, to_go)?;
    let ramp = tape.offset(ph, cfg.merge_ramp)?;
    let ramp = tape.scale(1.0 / cfg.merge_ramp, ramp)?;
    let ramp = tape.clamp(ramp, 0.0, 1.0)?;
    let abs_ph = tape.abs(ph)?;
    let mut penalty = tape.constant(0.0);
    for i in 0..n {
        let base = HOST_DIM + TARGET_DIM * i;
        let pt = tape.select(s, base, 1)?;
        let vt = tape.select(s, base + 1, 1)?;
        let abs_pt = tape.abs(pt)?;
        let sum = tape.add(abs_ph, abs_pt)?;
        let neg = tape.scale(-1.0, sum)?;
        let conflict = tape.offset(neg, cfg.caution_radius)?;
        let conflict = tape.pospart(conflict)?;
        let (follower, gap) = if tape.scalar(pt) >= tape.scalar(ph) {
            (vh, tape.sub(pt, ph)?)
        } else {
            (vt, tape.sub(ph, pt)?)
        };
        let need = tape.scale(cfg.headway, follower)?;
        let need = tape.offset(need, cfg.gap_margin)?;
        let deficit = tape.sub(need, gap)?;
        let deficit = tape.pospart(deficit)?;
        let weighted = tape.mul(ramp, deficit)?;
        let term = tape.add(conflict, weighted)?;
        penalty = tape.add(penalty, term)?;
    }
    let abs_a = tape.abs(a)?;
    let smooth = tape.scale(cfg.smoothness_weight, abs_a)?;
    let cost = tape.offset(smooth, cfg.time_cost)?;
    let safety = tape.scale(cfg.safety_weight, penalty)?;
    let cost = tape.add(cost, safety)?;
    let cost = tape.add(cost, remaining)?;
    tape.scale(-1.0, cost)
}

/// Merge-point conflict, or a headway shortfall once the host is on the
/// roundabout.
pub fn is_violation(s: &[f64], cfg: &RoundaboutConfig) -> bool {
    let (ph, vh) = (s[0], s[1]);
    s[HOST_DIM..].chunks(TARGET_DIM).any(|t| {
        let (pt, vt) = (t[0], t[1]);
        if ph.abs() < cfg.conflict_radius && pt.abs() < cfg.conflict_radius {
            return true;
        }
        if ph < 0.0 {
            return false;
        }
        if pt >= ph {
            pt - ph < cfg.headway * vh
        } else {
            ph - pt < cfg.headway * vt
        }
    })
}

#[derive(Debug, Clone)]
pub struct RoundaboutEnv {
    cfg: RoundaboutConfig,
    state: RoundaboutState,
    t: usize,
    done: bool,
}

/// Result of one roundabout step.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundStep {
    pub reward: f64,
    /// Discrete part of `reward` (violation penalty, exit bonus).
    pub event_reward: f64,
    pub next: Vec<f64>,
    pub done: bool,
    pub outcome: Option<Outcome>,
}

impl RoundaboutEnv {
    /// Places the host on its approach and `n_targets` targets at distinct
    /// arc positions, each at its cruise speed, and draws driver types.
    pub fn reset(seed: Seed, cfg: &RoundaboutConfig) -> Result<Self, RoundaboutError> {
        let mut rng = seed.rng();
        let draw = |(lo, hi): (f64, f64), rng: &mut rand_chacha::ChaCha8Rng| {
            lo + (hi - lo) * rng.random::<f64>()
        };
        let host_position = draw(cfg.host_start, &mut rng);
        let host_velocity = draw(cfg.host_speed, &mut rng);

        let mut positions: Vec<f64> = Vec::with_capacity(cfg.n_targets);
        let mut tries = 0;
        while positions.len() < cfg.n_targets {
            if tries == cfg.placement_tries {
                return Err(RoundaboutError::Placement {
                    n: cfg.n_targets,
                    spacing: cfg.min_spacing,
                    tries,
                });
            }
            tries += 1;
            let p = draw(cfg.target_span, &mut rng);
            if positions.iter().all(|q| (p - q).abs() >= cfg.min_spacing) {
                positions.push(p);
            }
        }
        // Most downstream target first.
        positions.sort_by(|a, b| b.total_cmp(a));
        let targets = positions
            .into_iter()
            .map(|position| {
                let cruise = draw(cfg.target_speed, &mut rng);
                let driver = if rng.random::<f64>() < cfg.p_aggressive {
                    DriverType::Aggressive
                } else {
                    DriverType::Defensive
                };
                Target {
                    position,
                    velocity: cruise,
                    acceleration: 0.0,
                    cruise,
                    driver,
                }
            })
            .collect();
        Ok(Self::from_state(
            RoundaboutState {
                host_position,
                host_velocity,
                targets,
            },
            cfg,
        ))
    }

    /// Starts from an explicit state (scripted scenarios).
    pub fn from_state(state: RoundaboutState, cfg: &RoundaboutConfig) -> Self {
        Self {
            cfg: RoundaboutConfig {
                n_targets: state.targets.len(),
                ..cfg.clone()
            },
            state,
            t: 0,
            done: false,
        }
    }

    pub fn config(&self) -> &RoundaboutConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RoundaboutState {
        &self.state
    }

    pub fn observe(&self) -> Vec<f64> {
        self.state.observe()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    fn driver_acceleration(&self, t: &Target, host_position: f64) -> f64 {
        let cfg = &self.cfg;
        let mut acc = cfg.tracking_gain * (t.cruise - t.velocity);
        let interacting = host_position.abs() <= cfg.host_window
            && t.position <= 0.0
            && t.position >= -cfg.target_window;
        if interacting {
            acc += match t.driver {
                DriverType::Aggressive => cfg.a_max,
                DriverType::Defensive => -cfg.a_max,
            };
        }
        acc.clamp(-cfg.a_max, cfg.a_max)
    }

    pub fn step(&mut self, a: f64) -> RoundStep {
        let cfg = &self.cfg;
        let s = self.state.observe();
        let shaped = round_shaped_reward(&s, a, cfg);
        let tau = cfg.tau;

        let host_position = self.state.host_position + tau * self.state.host_velocity;
        let host_velocity = relu(self.state.host_velocity + tau * a.clamp(-cfg.a_max, cfg.a_max));
        let mut targets = self.state.targets.clone();
        for t in &mut targets {
            t.position += tau * t.velocity;
            t.velocity = relu(t.velocity + tau * t.acceleration);
        }
        for i in 0..targets.len() {
            targets[i].acceleration = self.driver_acceleration(&targets[i], host_position);
        }
        self.state = RoundaboutState {
            host_position,
            host_velocity,
            targets,
        };
        self.t += 1;

        let next = self.state.observe();
        let cfg = &self.cfg;
        let outcome = if is_violation(&next, cfg) {
            Some(Outcome::Violation)
        } else if host_position >= cfg.exit_distance {
            Some(Outcome::Exit)
        } else if self.t >= cfg.horizon {
            Some(Outcome::Timeout)
        } else {
            None
        };
        let event_reward = match outcome {
            Some(Outcome::Violation) => -cfg.violation_penalty,
            Some(Outcome::Exit) => cfg.exit_bonus,
            _ => 0.0,
        };
        self.done = outcome.is_some();
        RoundStep {
            reward: shaped + event_reward,
            event_reward,
            next,
            done: self.done,
            outcome,
        }
    }
}
