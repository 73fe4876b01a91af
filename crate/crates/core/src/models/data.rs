use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::envs::{residual, EnvConfig, RoundaboutError, StepRecord};
use crate::rng::Seed;

use super::net::NetSpec;

/// Anything that maps a state to an action.
pub trait Controller: Sync {
    fn act(&self, s: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;

    fn describe(&self) -> String;
}

/// `π_θ` backed by a network.
#[derive(Debug, Clone)]
pub struct NetPolicy {
    pub net: NetSpec,
    pub theta: Vec<f64>,
}

impl Controller for NetPolicy {
    fn act(&self, s: &[f64], _: &mut ChaCha8Rng) -> Vec<f64> {
        self.net.eval(&self.theta, s)
    }

    fn describe(&self) -> String {
        format!("mlp{:?}", self.net.mlp.hidden)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub action_dim: usize,
}

impl Controller for ZeroPolicy {
    fn act(&self, _: &[f64], _: &mut ChaCha8Rng) -> Vec<f64> {
        vec![0.0; self.action_dim]
    }

    fn describe(&self) -> String {
        "zero".into()
    }
}

/// Uniform over a box, independently per step.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub action_dim: usize,
    pub lo: f64,
    pub hi: f64,
}

impl UniformPolicy {
    pub fn for_env(env: &EnvConfig) -> Self {
        let (lo, hi) = env.action_box();
        Self {
            action_dim: env.action_dim(),
            lo,
            hi,
        }
    }
}

impl Controller for UniformPolicy {
    fn act(&self, _: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.action_dim)
            .map(|_| rng.random_range(self.lo..=self.hi))
            .collect()
    }

    fn describe(&self) -> String {
        format!("uniform[{}, {}]", self.lo, self.hi)
    }
}

/// Deterministic closure policy.
pub struct FnPolicy<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> Controller for FnPolicy<F> {
    fn act(&self, s: &[f64], _: &mut ChaCha8Rng) -> Vec<f64> {
        (self.f)(s)
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exploration {
    /// Probability of a uniform action from the action box.
    pub epsilon: f64,
    /// Std of Gaussian noise added to the behaviour action otherwise.
    pub sigma: f64,
}

impl Default for Exploration {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            sigma: 0.5,
        }
    }
}

/// How a batch of tuples was generated.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectInfo {
    pub env: &'static str,
    pub behavior: String,
    pub exploration: Exploration,
    pub seed: Seed,
    pub episodes: usize,
}

/// Raw `(s, a, r, s')` tuples with their decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollouts {
    pub records: Vec<StepRecord>,
    pub info: CollectInfo,
}

/// Regression pairs `x → y`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub info: Option<CollectInfo>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Self {
        assert_eq!(inputs.len(), targets.len(), "one target per input");
        Self {
            inputs,
            targets,
            info: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            info: self.info.clone(),
        }
    }

    /// Seeded `(train, held_out)` split; the held-out part gets
    /// `round(fraction · n)` pairs.
    pub fn split(&self, fraction: f64, seed: Seed) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut idx, &mut seed.rng());
        let n_held = (fraction * self.len() as f64).round() as usize;
        let (held, train) = idx.split_at(n_held);
        (self.subset(train), self.subset(held))
    }

    /// Per-component mean of the targets.
    pub fn target_mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let dim = self.targets.first().map_or(0, Vec::len);
        (0..dim)
            .map(|j| self.targets.iter().map(|t| t[j]).sum::<f64>() / n)
            .collect()
    }

    /// Per-component standard deviation of the targets.
    pub fn target_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let dim = self.targets.first().map_or(0, Vec::len);
        (0..dim)
            .map(|j| {
                let mean = self.targets.iter().map(|t| t[j]).sum::<f64>() / n;
                (self
                    .targets
                    .iter()
                    .map(|t| (t[j] - mean).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt()
            })
            .collect()
    }
}

pub(crate) fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

impl Rollouts {
    /// `((s, a), s')` pairs.
    pub fn next_state_data(&self) -> Dataset {
        self.pairs(|r| r.s_next.clone())
    }

    /// `((s, a), r)` pairs.
    pub fn reward_data(&self) -> Dataset {
        self.pairs(|r| vec![r.r])
    }

    fn pairs(&self, target: impl Fn(&StepRecord) -> Vec<f64>) -> Dataset {
        Dataset {
            inputs: self
                .records
                .iter()
                .map(|r| [r.s.as_slice(), &r.a].concat())
                .collect(),
            targets: self.records.iter().map(target).collect(),
            info: Some(self.info.clone()),
        }
    }
}

/// Runs one exploratory episode from `seed`.
fn explore_episode(
    env: &EnvConfig,
    behavior: &dyn Controller,
    exploration: Exploration,
    seed: Seed,
) -> Result<Vec<StepRecord>, RoundaboutError> {
    let mut sim = env.reset(seed.derive("env"))?;
    let mut rng = seed.derive("explore").rng();
    let noise = Normal::new(0.0, exploration.sigma.max(0.0)).expect("finite sigma");
    let (lo, hi) = env.action_box();
    let mut out = Vec::new();
    loop {
        let s = sim.state();
        let a: Vec<f64> = if exploration.epsilon > 0.0 && rng.random::<f64>() < exploration.epsilon
        {
            (0..env.action_dim())
                .map(|_| rng.random_range(lo..=hi))
                .collect()
        } else {
            let base = behavior.act(&s, &mut rng);
            if exploration.sigma > 0.0 {
                base.iter().map(|b| b + noise.sample(&mut rng)).collect()
            } else {
                base
            }
        };
        let s_hat = env.predictable(&s, &a);
        let tr = sim.step(&a);
        let nu = residual(&tr.next, &s_hat);
        out.push(StepRecord {
            s,
            a,
            r: tr.reward,
            s_next: tr.next,
            s_hat,
            nu,
            done: tr.done,
        });
        if tr.done {
            return Ok(out);
        }
    }
}

/// Collects exactly `n` tuples from seeded episodes. Episodes run in
/// parallel and are merged in seed order, so the result does not depend on
/// scheduling.
pub fn collect(
    env: &EnvConfig,
    behavior: &dyn Controller,
    exploration: Exploration,
    n: usize,
    seed: Seed,
) -> Result<Rollouts, RoundaboutError> {
    assert!(n > 0, "collect needs n > 0");
    let per_episode = env.horizon().max(1);
    let mut records = Vec::with_capacity(n);
    let mut next_episode = 0u64;
    while records.len() < n {
        let want = (n - records.len()).div_ceil(per_episode).max(1) as u64;
        let batch: Vec<Vec<StepRecord>> = (next_episode..next_episode + want)
            .into_par_iter()
            .map(|k| explore_episode(env, behavior, exploration, seed.child(k)))
            .collect::<Result<_, _>>()?;
        next_episode += want;
        for ep in batch {
            records.extend(ep);
        }
    }
    records.truncate(n);
    Ok(Rollouts {
        records,
        info: CollectInfo {
            env: env.kind().name(),
            behavior: behavior.describe(),
            exploration,
            seed,
            episodes: next_episode as usize,
        },
    })
}
