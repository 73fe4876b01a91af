use crate::diff::{NodeId, Tape};
use crate::envs::{residual, Env, EnvConfig, Outcome, StepRecord};
use crate::models::{Exploration, MlpNodes, NetSpec};
use crate::rng::Seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::TrainError;

/// Where `ŝ` or `r̂` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    /// The environment's own differentiable formula.
    Analytic,
    Learned(NetSpec),
}

impl ModelSource {
    pub fn is_learned(&self) -> bool {
        matches!(self, ModelSource::Learned(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnrollConfig {
    pub env: EnvConfig,
    /// Maximum number of steps; the episode may end earlier.
    pub horizon: usize,
    pub policy: NetSpec,
    pub next_model: ModelSource,
    pub reward_model: ModelSource,
    /// Weights of the supervised terms; only used for learned models.
    pub lambda_next: f64,
    pub lambda_reward: f64,
    /// Action noise in training episodes, so that learned predictors see
    /// actions off the current policy.
    pub exploration: Option<Exploration>,
}

impl UnrollConfig {
    /// Analytic dynamics and reward, no supervised terms.
    pub fn analytic(env: EnvConfig, policy: NetSpec) -> Self {
        Self {
            horizon: env.horizon(),
            env,
            policy,
            next_model: ModelSource::Analytic,
            reward_model: ModelSource::Analytic,
            lambda_next: 0.0,
            lambda_reward: 0.0,
            exploration: None,
        }
    }

    pub fn validate(&self, params: &Params) -> Result<(), TrainError> {
        let (ds, da) = (self.env.state_dim(), self.env.action_dim());
        let bad = |m: String| Err(TrainError::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.policy.input_dim() != ds || self.policy.output_dim() != da {
            return bad(format!("policy must map {ds} → {da}"));
        }
        if params.policy.len() != self.policy.mlp.num_params() {
            return bad("policy parameter count".into());
        }
        if !(self.lambda_next >= 0.0 && self.lambda_reward >= 0.0) {
            return bad("supervised weights must be non-negative".into());
        }
        for (src, theta, out, what) in [
            (&self.next_model, &params.next, ds, "next-state"),
            (&self.reward_model, &params.reward, 1, "reward"),
        ] {
            match (src, theta) {
                (ModelSource::Analytic, None) => {}
                (ModelSource::Learned(net), Some(theta)) => {
                    if net.input_dim() != ds + da || net.output_dim() != out {
                        return bad(format!("{what} model must map {} → {out}", ds + da));
                    }
                    if theta.len() != net.mlp.num_params() {
                        return bad(format!("{what} model parameter count"));
                    }
                }
                (ModelSource::Analytic, Some(_)) => {
                    return bad(format!("{what} model is analytic but has parameters"))
                }
                (ModelSource::Learned(_), None) => {
                    return bad(format!("{what} model is learned but has no parameters"))
                }
            }
        }
        Ok(())
    }
}

/// Trainable parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub policy: Vec<f64>,
    pub next: Option<Vec<f64>>,
    pub reward: Option<Vec<f64>>,
}

impl Params {
    pub fn policy_only(policy: Vec<f64>) -> Self {
        Self {
            policy,
            next: None,
            reward: None,
        }
    }
}

/// Exploration applied to the policy's action at one step.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionNoise {
    None,
    /// Added to the policy output.
    Add(Vec<f64>),
    /// Replaces it; the policy gets no gradient through this action.
    Replace(Vec<f64>),
}

impl ActionNoise {
    fn draw(
        ex: &Exploration,
        lo: f64,
        hi: f64,
        dim: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        if ex.epsilon > 0.0 && rng.random::<f64>() < ex.epsilon {
            ActionNoise::Replace((0..dim).map(|_| rng.random_range(lo..=hi)).collect())
        } else if ex.sigma > 0.0 {
            let normal = Normal::new(0.0, ex.sigma).expect("finite sigma");
            ActionNoise::Add((0..dim).map(|_| normal.sample(rng)).collect())
        } else {
            ActionNoise::None
        }
    }

    fn apply(&self, a: Vec<f64>) -> Vec<f64> {
        match self {
            ActionNoise::None => a,
            ActionNoise::Add(n) => a.iter().zip(n).map(|(x, e)| x + e).collect(),
            ActionNoise::Replace(r) => r.clone(),
        }
    }

    fn apply_node(&self, tape: &mut Tape, a: NodeId) -> Result<NodeId, TrainError> {
        Ok(match self {
            ActionNoise::None => a,
            ActionNoise::Add(n) => {
                let n = tape.leaf_blocked(n);
                tape.add(a, n)?
            }
            ActionNoise::Replace(r) => tape.leaf_blocked(r),
        })
    }
}

/// Simulator outputs of one step, kept so an episode can be replayed with
/// different parameters but the same residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    /// State and action as recorded; the supervised terms see these.
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub noise: ActionNoise,
    pub nu: Vec<f64>,
    pub s_next: Vec<f64>,
    pub reward: f64,
    pub event_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub s0: Vec<f64>,
    pub steps: Vec<ReplayStep>,
}

/// Where the residuals come from.
#[derive(Debug, Clone, Copy)]
pub enum Residuals<'a> {
    /// Run the simulator from this episode seed.
    Live(Seed),
    /// Reuse a recorded sequence.
    Replay(&'a Replay),
}

/// Which parameter sets get gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Policy,
    All,
}

/// The unrolled episode.
#[derive(Debug)]
pub struct Unrolled {
    pub tape: Tape,
    pub objective: NodeId,
    pub policy_leaf: NodeId,
    pub next_leaf: Option<NodeId>,
    pub reward_leaf: Option<NodeId>,
    pub trace: Vec<StepRecord>,
    pub replay: Replay,
    /// `Σ r_t` from the simulator (live) or the recording (replay).
    pub true_return: f64,
    /// `Σ ‖ŝ − s′‖²`, zero for an analytic next-state model.
    pub next_loss: f64,
    /// `Σ (r̂ − r)²`, zero for an analytic reward.
    pub reward_loss: f64,
    pub outcome: Option<Outcome>,
}

impl Unrolled {
    pub fn objective_value(&self) -> f64 {
        self.tape.scalar(self.objective)
    }
}

/// Seeds an environment instance for an episode.
pub fn episode_env(env: &EnvConfig, seed: Seed) -> Result<Env, TrainError> {
    Ok(env.reset(seed.derive("env"))?)
}

/// Builds `Σ_t r̂_t − λ_N Σ‖ŝ − s′‖² − λ_r Σ(r̂ − r)²` on one tape.
///
/// Forward states follow the simulator exactly: `s_{t+1} = ŝ_{t+1} + ν`
/// with `ν` a blocked leaf, so gradients run along the `ŝ` chain only.
pub fn unroll_episode(
    cfg: &UnrollConfig,
    params: &Params,
    residuals: Residuals<'_>,
    trainable: Trainable,
) -> Result<Unrolled, TrainError> {
    cfg.validate(params)?;
    let mut tape = Tape::new();
    let all = trainable == Trainable::All;

    let pol = MlpNodes::bind(&mut tape, &cfg.policy.mlp, &params.policy)?;
    // Learned predictors appear twice: frozen on the planning path, and as
    // trainable leaves (when `all`) in their supervised terms only.
    let learned =
        |tape: &mut Tape, src: &ModelSource, theta: &Option<Vec<f64>>| -> Result<_, TrainError> {
            Ok(match (src, theta) {
                (ModelSource::Learned(net), Some(theta)) => {
                    let chain = MlpNodes::bind_frozen(tape, &net.mlp, theta)?;
                    let fit = if all {
                        Some(MlpNodes::bind(tape, &net.mlp, theta)?)
                    } else {
                        None
                    };
                    Some((chain, fit))
                }
                _ => None,
            })
        };
    let next_nodes = learned(&mut tape, &cfg.next_model, &params.next)?;
    let reward_nodes = learned(&mut tape, &cfg.reward_model, &params.reward)?;

    let mut sim = match residuals {
        Residuals::Live(seed) => Some(episode_env(&cfg.env, seed)?),
        Residuals::Replay(_) => None,
    };
    let s0 = match (&sim, residuals) {
        (Some(e), _) => e.state(),
        (None, Residuals::Replay(r)) => r.s0.clone(),
        (None, Residuals::Live(_)) => unreachable!(),
    };
    let steps = match residuals {
        Residuals::Live(_) => cfg.horizon,
        Residuals::Replay(r) => r.steps.len().min(cfg.horizon),
    };

    let mut explore_rng = match residuals {
        Residuals::Live(seed) => Some(seed.derive("explore").rng()),
        Residuals::Replay(_) => None,
    };
    let (lo, hi) = cfg.env.action_box();

    let mut s = tape.leaf_blocked(&s0);
    let mut rewards = Vec::new();
    let mut next_terms = Vec::new();
    let mut reward_terms = Vec::new();
    let mut trace = Vec::new();
    let mut recorded = Vec::new();
    let mut true_rewards = Vec::new();
    let mut next_loss = 0.0;
    let mut reward_loss = 0.0;
    let mut outcome = None;

    for t in 0..steps {
        tape.begin_segment(t);
        let noise = match (residuals, &cfg.exploration, &mut explore_rng) {
            (Residuals::Replay(r), _, _) => r.steps[t].noise.clone(),
            (Residuals::Live(_), Some(ex), Some(rng)) => {
                ActionNoise::draw(ex, lo, hi, cfg.env.action_dim(), rng)
            }
            _ => ActionNoise::None,
        };
        let a = cfg.policy.forward(&mut tape, &pol, s)?;
        let a = noise.apply_node(&mut tape, a)?;
        let s_val = tape.value(s).to_vec();
        let a_val = tape.value(a).to_vec();

        let s_hat = match (&cfg.next_model, &next_nodes) {
            (ModelSource::Learned(net), Some((nodes, _))) => {
                let sa = tape.concat(&[s, a])?;
                net.forward(&mut tape, nodes, sa)?
            }
            _ => cfg.env.predictable_node(&mut tape, s, a)?,
        };
        let r_hat = match (&cfg.reward_model, &reward_nodes) {
            (ModelSource::Learned(net), Some((nodes, _))) => {
                let sa = tape.concat(&[s, a])?;
                net.forward(&mut tape, nodes, sa)?
            }
            _ => cfg.env.reward_node(&mut tape, s, a)?,
        };
        let s_hat_val = tape.value(s_hat).to_vec();

        let (step, done) = match (&mut sim, residuals) {
            (Some(env), _) => {
                let tr = env.step(&a_val);
                let nu = residual(&tr.next, &s_hat_val);
                outcome = tr.outcome;
                let step = ReplayStep {
                    s: s_val.clone(),
                    a: a_val.clone(),
                    noise,
                    nu,
                    s_next: tr.next,
                    reward: tr.reward,
                    event_reward: tr.event_reward,
                };
                (step, tr.done)
            }
            (None, Residuals::Replay(r)) => (r.steps[t].clone(), t + 1 == steps),
            (None, Residuals::Live(_)) => unreachable!(),
        };

        // Discrete events are not functions of (s, a); they enter as constants
        // on top of an analytic reward.
        let r_node = if !cfg.reward_model.is_learned() && step.event_reward != 0.0 {
            tape.offset(r_hat, step.event_reward)?
        } else {
            r_hat
        };
        rewards.push(r_node);

        // Supervised terms fit one-step predictions from the recorded (s, a):
        // their gradient reaches the predictor directly, not through the
        // unrolled chain or the policy.
        if let (ModelSource::Learned(net), Some((chain, fit))) = (&cfg.next_model, &next_nodes) {
            next_loss += sq_error(&s_hat_val, &step.s_next);
            if cfg.lambda_next > 0.0 {
                let sa = tape.leaf_blocked(&[step.s.as_slice(), &step.a].concat());
                let pred = net.forward(&mut tape, fit.as_ref().unwrap_or(chain), sa)?;
                let target = tape.leaf_blocked(&step.s_next);
                next_terms.push(tape.sq_diff(pred, target)?);
            }
        }
        if let (ModelSource::Learned(net), Some((chain, fit))) = (&cfg.reward_model, &reward_nodes)
        {
            reward_loss += sq_error(tape.value(r_hat), &[step.reward]);
            if cfg.lambda_reward > 0.0 {
                let sa = tape.leaf_blocked(&[step.s.as_slice(), &step.a].concat());
                let pred = net.forward(&mut tape, fit.as_ref().unwrap_or(chain), sa)?;
                let target = tape.leaf_blocked(&[step.reward]);
                reward_terms.push(tape.sq_diff(pred, target)?);
            }
        }

        let nu_leaf = tape.leaf_blocked(&step.nu);
        let s_next = tape.add(s_hat, nu_leaf)?;
        true_rewards.push(step.reward);
        trace.push(StepRecord {
            s: s_val,
            a: a_val,
            r: step.reward,
            s_next: tape.value(s_next).to_vec(),
            s_hat: s_hat_val,
            nu: step.nu.clone(),
            done,
        });
        recorded.push(step);
        s = s_next;
        if done {
            break;
        }
    }

    let all_r = tape.concat(&rewards)?;
    let mut objective = tape.sum(all_r)?;
    for (terms, lambda) in [
        (&next_terms, cfg.lambda_next),
        (&reward_terms, cfg.lambda_reward),
    ] {
        if !terms.is_empty() {
            let joined = tape.concat(terms)?;
            let total = tape.sum(joined)?;
            let weighted = tape.scale(-lambda, total)?;
            objective = tape.add(objective, weighted)?;
        }
    }

    Ok(Unrolled {
        objective,
        policy_leaf: pol.theta,
        next_leaf: next_nodes.and_then(|(_, fit)| fit).map(|n| n.theta),
        reward_leaf: reward_nodes.and_then(|(_, fit)| fit).map(|n| n.theta),
        trace,
        replay: Replay {
            s0,
            steps: recorded,
        },
        true_return: true_rewards.iter().sum(),
        next_loss,
        reward_loss,
        outcome,
        tape,
    })
}

/// The replayed objective evaluated without a tape. Serves as the function
/// whose finite differences check the tape gradient.
pub fn replay_objective(cfg: &UnrollConfig, params: &Params, replay: &Replay) -> f64 {
    replay_objective_split(cfg, params, params, replay)
}

/// As [`replay_objective`], but the planning path (policy and predictors)
/// uses `chain` while the supervised terms use the predictors in `fit`.
pub fn replay_objective_split(
    cfg: &UnrollConfig,
    chain: &Params,
    fit: &Params,
    replay: &Replay,
) -> f64 {
    let params = chain;
    let mut s = replay.s0.clone();
    let mut rewards = Vec::new();
    let mut next_terms = Vec::new();
    let mut reward_terms = Vec::new();
    for step in replay.steps.iter().take(cfg.horizon) {
        let a = step.noise.apply(cfg.policy.eval(&params.policy, &s));
        let sa = [s.as_slice(), &a].concat();
        let s_hat = match (&cfg.next_model, &params.next) {
            (ModelSource::Learned(net), Some(theta)) => net.eval(theta, &sa),
            _ => cfg.env.predictable(&s, &a),
        };
        let r_hat = match (&cfg.reward_model, &params.reward) {
            (ModelSource::Learned(net), Some(theta)) => net.eval(theta, &sa)[0],
            _ => cfg.env.reward(&s, &a) + step.event_reward,
        };
        rewards.push(r_hat);
        if let (ModelSource::Learned(net), Some(theta)) = (&cfg.next_model, &fit.next) {
            let pred = net.eval(theta, &[step.s.as_slice(), &step.a].concat());
            next_terms.push(sq_error(&pred, &step.s_next));
        }
        if let (ModelSource::Learned(net), Some(theta)) = (&cfg.reward_model, &fit.reward) {
            let pred = net.eval(theta, &[step.s.as_slice(), &step.a].concat());
            reward_terms.push(sq_error(&pred, &[step.reward]));
        }
        s = s_hat.iter().zip(&step.nu).map(|(h, n)| h + n).collect();
    }
    let mut total: f64 = rewards.iter().sum();
    if cfg.lambda_next > 0.0 {
        total += -cfg.lambda_next * next_terms.iter().sum::<f64>();
    }
    if cfg.lambda_reward > 0.0 {
        total += -cfg.lambda_reward * reward_terms.iter().sum::<f64>();
    }
    total
}

/// `‖p − y‖²`, summed in the same order as the tape's `sq_diff`.
fn sq_error(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, y)| (p - y) * (p - y))
        .sum()
}
