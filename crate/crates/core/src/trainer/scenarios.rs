//! Scripted single-target merges for checking how a roundabout policy
//! reacts to each driver type.

use crate::envs::roundabout::{
    DriverType, Outcome, RoundaboutConfig, RoundaboutEnv, RoundaboutState, Target, HOST_DIM,
    TARGET_DIM,
};
use crate::models::Controller;
use crate::rng::Seed;

/// Host and one interacting target, both before the merge point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeScenario {
    pub name: &'static str,
    pub host_position: f64,
    pub host_velocity: f64,
    pub target_position: f64,
    pub target_velocity: f64,
}

/// Both vehicles inside the interaction window, close enough that either
/// could take the merge point first.
pub fn single_target_scenarios() -> Vec<MergeScenario> {
    vec![
        MergeScenario {
            name: "target-behind",
            host_position: -14.0,
            host_velocity: 3.0,
            target_position: -18.0,
            target_velocity: 6.0,
        },
        MergeScenario {
            name: "level",
            host_position: -14.0,
            host_velocity: 3.0,
            target_position: -14.0,
            target_velocity: 6.0,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    pub scenario: &'static str,
    pub driver: DriverType,
    /// First step after which the host is past the merge point.
    pub host_cross: Option<usize>,
    pub target_cross: Option<usize>,
    pub outcome: Option<Outcome>,
}

impl MergeResult {
    /// Whether the host took the merge point first; `None` if neither did.
    pub fn host_first(&self) -> Option<bool> {
        match (self.host_cross, self.target_cross) {
            (Some(h), Some(t)) => Some(h < t),
            (Some(_), None) => Some(true),
            (None, Some(_)) => Some(false),
            (None, None) => None,
        }
    }
}

/// Plays a scenario to the end. A policy trained with `n_targets > 1` sees
/// the remaining slots filled by cars already well past the merge point,
/// ahead of the host and outside any interaction.
pub fn run_merge(
    cfg: &RoundaboutConfig,
    controller: &dyn Controller,
    scenario: &MergeScenario,
    driver: DriverType,
) -> MergeResult {
    let cruise = cfg.target_speed.1;
    let mut targets: Vec<Target> = (0..cfg.n_targets.saturating_sub(1))
        .rev()
        .map(|k| Target {
            position: 25.0 + 20.0 * k as f64,
            velocity: cruise,
            acceleration: 0.0,
            cruise,
            driver: DriverType::Defensive,
        })
        .collect();
    targets.push(Target {
        position: scenario.target_position,
        velocity: scenario.target_velocity,
        acceleration: 0.0,
        cruise: scenario.target_velocity,
        driver,
    });
    let slot = HOST_DIM + TARGET_DIM * (targets.len() - 1);
    let state = RoundaboutState {
        host_position: scenario.host_position,
        host_velocity: scenario.host_velocity,
        targets,
    };
    let mut env = RoundaboutEnv::from_state(state, cfg);
    let mut rng = Seed(0).rng();
    let mut result = MergeResult {
        scenario: scenario.name,
        driver,
        host_cross: None,
        target_cross: None,
        outcome: None,
    };
    loop {
        let s = env.observe();
        let a = controller.act(&s, &mut rng);
        let step = env.step(a[0]);
        if result.host_cross.is_none() && step.next[0] >= 0.0 {
            result.host_cross = Some(env.t());
        }
        if result.target_cross.is_none() && step.next[slot] >= 0.0 {
            result.target_cross = Some(env.t());
        }
        if step.done {
            result.outcome = step.outcome;
            return result;
        }
    }
}
