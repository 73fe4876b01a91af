use rayon::prelude::*;

use crate::envs::acc::{headway_ratio, AccState};
use crate::envs::line::line_loss;
use crate::envs::{EnvConfig, EnvKind, Outcome};
use crate::models::Controller;
use crate::rng::Seed;

use super::unroll::episode_env;
use super::TrainError;

/// One episode driven by a controller against the true simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    /// States at which actions were taken, `s_0 … s_{T−1}`.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub final_state: Vec<f64>,
    pub outcome: Option<Outcome>,
}

impl EpisodeResult {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn steps(&self) -> usize {
        self.rewards.len()
    }
}

pub fn rollout(
    env: &EnvConfig,
    controller: &dyn Controller,
    seed: Seed,
) -> Result<EpisodeResult, TrainError> {
    let mut sim = episode_env(env, seed)?;
    let mut rng = seed.derive("policy").rng();
    let mut out = EpisodeResult {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        final_state: Vec::new(),
        outcome: None,
    };
    loop {
        let s = sim.state();
        let a = controller.act(&s, &mut rng);
        let tr = sim.step(&a);
        out.states.push(s);
        out.actions.push(a);
        out.rewards.push(tr.reward);
        if tr.done {
            out.final_state = tr.next;
            out.outcome = tr.outcome;
            return Ok(out);
        }
    }
}

/// Aggregate evaluation metrics over seeded episodes, using true rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_steps: f64,
    pub extras: Vec<(&'static str, f64)>,
}

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.extras
            .iter()
            .find(|(k, _)| *k == name)
            .map(|&(_, v)| v)
    }

    pub fn column_names(&self) -> Vec<&'static str> {
        let mut names = vec!["mean_return", "mean_steps"];
        names.extend(self.extras.iter().map(|(k, _)| *k));
        names
    }

    pub fn column_values(&self) -> Vec<f64> {
        let mut vals = vec![self.mean_return, self.mean_steps];
        vals.extend(self.extras.iter().map(|&(_, v)| v));
        vals
    }
}

/// Runs `n` episodes with seeds `seed.child(i)` (in parallel, merged in
/// order) and summarises them.
pub fn evaluate(
    env: &EnvConfig,
    controller: &dyn Controller,
    n: usize,
    seed: Seed,
) -> Result<Metrics, TrainError> {
    if n == 0 {
        return Err(TrainError::Config(
            "evaluate needs at least one episode".into(),
        ));
    }
    let runs: Vec<EpisodeResult> = (0..n as u64)
        .into_par_iter()
        .map(|i| rollout(env, controller, seed.child(i)))
        .collect::<Result<_, _>>()?;
    Ok(summarize(env, &runs))
}

pub fn summarize(env: &EnvConfig, runs: &[EpisodeResult]) -> Metrics {
    let n = runs.len() as f64;
    let mean_return = runs.iter().map(EpisodeResult::total_reward).sum::<f64>() / n;
    let total_steps: usize = runs.iter().map(EpisodeResult::steps).sum();
    let mean_steps = total_steps as f64 / n;
    let extras = match env.kind() {
        EnvKind::Acc => {
            let in_band = runs
                .iter()
                .flat_map(|r| &r.states)
                .filter(|s| (headway_ratio(AccState::from_slice(s)) - 1.0).abs() <= 0.3)
                .count();
            let abs_a: f64 = runs
                .iter()
                .flat_map(|r| &r.actions)
                .map(|a| a[0].abs())
                .sum();
            vec![
                ("in_band", in_band as f64 / total_steps as f64),
                ("mean_abs_action", abs_a / total_steps as f64),
            ]
        }
        EnvKind::Line => {
            let loss: f64 = runs
                .iter()
                .flat_map(|r| r.states.iter().zip(&r.actions))
                .map(|(s, a)| line_loss(s[0], a[0]))
                .sum();
            vec![("mean_step_loss", loss / total_steps as f64)]
        }
        EnvKind::Roundabout => {
            let count = |o: Outcome| runs.iter().filter(|r| r.outcome == Some(o)).count() as f64;
            let exits: Vec<usize> = runs
                .iter()
                .filter(|r| r.outcome == Some(Outcome::Exit))
                .map(EpisodeResult::steps)
                .collect();
            let steps_to_exit = if exits.is_empty() {
                f64::NAN
            } else {
                exits.iter().sum::<usize>() as f64 / exits.len() as f64
            };
            vec![
                ("success_rate", count(Outcome::Exit) / n),
                ("violation_rate", count(Outcome::Violation) / n),
                ("timeout_rate", count(Outcome::Timeout) / n),
                ("mean_steps_to_exit", steps_to_exit),
            ]
        }
    };
    Metrics {
        episodes: runs.len(),
        mean_return,
        mean_steps,
        extras,
    }
}
