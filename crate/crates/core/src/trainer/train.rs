use crate::models::{mlp_init, NetPolicy};
use crate::rng::Seed;

use super::eval::{evaluate, Metrics};
use super::optim::Ascent;
use super::unroll::{
    unroll_episode, ModelSource, Params, Residuals, Trainable, UnrollConfig, Unrolled,
};
use super::TrainError;

/// Gradients of the objective with respect to each trainable set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub policy: Vec<f64>,
    pub next: Option<Vec<f64>>,
    pub reward: Option<Vec<f64>>,
}

impl PolicyGradient {
    /// All trainable gradients back to back: policy, next, reward.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.policy.clone();
        out.extend(self.next.iter().flatten());
        out.extend(self.reward.iter().flatten());
        out
    }
}

/// BPTT over an unrolled episode.
pub fn policy_gradient(unrolled: &mut Unrolled) -> Result<PolicyGradient, TrainError> {
    let g = unrolled.tape.backward(unrolled.objective)?;
    if let Some(node) = unrolled.tape.first_non_finite_adjoint() {
        return Err(TrainError::NonFiniteGradient {
            step: unrolled.tape.segment_of(node),
        });
    }
    let take = |id| g.get(id).map(<[f64]>::to_vec).unwrap_or_default();
    Ok(PolicyGradient {
        policy: take(unrolled.policy_leaf),
        next: unrolled.next_leaf.map(take),
        reward: unrolled.reward_leaf.map(take),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Policy step size.
    pub lr: f64,
    /// Step size for learned predictors in joint training.
    pub model_lr: f64,
    pub momentum: f64,
    pub clip: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: Seed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            lr: 1e-3,
            model_lr: 1e-3,
            momentum: 0.9,
            clip: 1.0,
            eval_every: 100,
            eval_episodes: 20,
            seed: Seed(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr >= 0.0
            && self.model_lr >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.clip >= 0.0
            && self.eval_every > 0
            && self.eval_episodes > 0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "invalid training config {self:?}"
            )))
        }
    }
}

/// One evaluation point on the learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub episode: usize,
    /// Mean unrolled objective over the evaluation seeds.
    pub objective: f64,
    /// Mean per-step supervised next-state loss on the evaluation seeds.
    pub next_loss: f64,
    /// Mean per-step supervised reward loss on the evaluation seeds.
    pub reward_loss: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the last episode.
    pub params: Params,
    /// Parameters at the curve row with the highest objective (earliest on
    /// ties). Scored on the curve's evaluation seeds.
    pub best: Params,
    pub best_episode: usize,
    pub curve: Vec<CurveRow>,
    /// Objective of each training episode.
    pub objectives: Vec<f64>,
}

/// Fresh parameters: Glorot policy, and Glorot predictors where learned.
pub fn init_params(cfg: &UnrollConfig, seed: Seed) -> Params {
    let learned = |src: &ModelSource, label: &str| match src {
        ModelSource::Learned(net) => Some(mlp_init(&net.mlp, seed.derive(label)).into_values()),
        ModelSource::Analytic => None,
    };
    Params {
        policy: mlp_init(&cfg.policy.mlp, seed.derive("policy")).into_values(),
        next: learned(&cfg.next_model, "next"),
        reward: learned(&cfg.reward_model, "reward"),
    }
}

fn eval_row(
    train: &TrainConfig,
    unroll: &UnrollConfig,
    params: &Params,
    episode: usize,
) -> Result<CurveRow, TrainError> {
    let seed = train.seed.derive("eval");
    let unroll = &UnrollConfig {
        exploration: None,
        ..unroll.clone()
    };
    let controller = NetPolicy {
        net: unroll.policy.clone(),
        theta: params.policy.clone(),
    };
    let metrics = evaluate(&unroll.env, &controller, train.eval_episodes, seed)?;
    let (mut objective, mut next_loss, mut reward_loss, mut steps) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..train.eval_episodes {
        let u = unroll_episode(
            unroll,
            params,
            Residuals::Live(seed.child(i as u64)),
            Trainable::Policy,
        )?;
        objective += u.objective_value();
        next_loss += u.next_loss;
        reward_loss += u.reward_loss;
        steps += u.trace.len();
    }
    let n = train.eval_episodes as f64;
    Ok(CurveRow {
        episode,
        objective: objective / n,
        next_loss: next_loss / steps as f64,
        reward_loss: reward_loss / steps as f64,
        metrics,
    })
}

/// Called after every evaluation with the current row and parameters.
pub type EvalHook<'a> = dyn FnMut(&CurveRow, &Params) -> Result<(), TrainError> + 'a;

fn run(
    train: &TrainConfig,
    unroll: &UnrollConfig,
    init: Params,
    which: Trainable,
    hook: &mut EvalHook<'_>,
) -> Result<TrainOutcome, TrainError> {
    train.validate()?;
    unroll.validate(&init)?;
    let mut params = init;
    let mut opt_pi = Ascent::new(train.lr, train.momentum, train.clip, params.policy.len());
    let mut opt_next = params
        .next
        .as_ref()
        .map(|p| Ascent::new(train.model_lr, train.momentum, train.clip, p.len()));
    let mut opt_reward = params
        .reward
        .as_ref()
        .map(|p| Ascent::new(train.model_lr, train.momentum, train.clip, p.len()));

    let mut curve = Vec::new();
    let mut objectives = Vec::with_capacity(train.episodes);
    let row = eval_row(train, unroll, &params, 0)?;
    hook(&row, &params)?;
    let (mut best, mut best_episode, mut best_objective) = (params.clone(), 0, row.objective);
    curve.push(row);

    let episode_seeds = train.seed.derive("train");
    for k in 0..train.episodes {
        let mut u = unroll_episode(
            unroll,
            &params,
            Residuals::Live(episode_seeds.child(k as u64)),
            which,
        )?;
        let objective = u.objective_value();
        if !objective.is_finite() {
            return Err(TrainError::Divergence {
                episode: k,
                step: None,
            });
        }
        objectives.push(objective);
        let g = policy_gradient(&mut u).map_err(|e| match e {
            TrainError::NonFiniteGradient { step } => TrainError::Divergence { episode: k, step },
            other => other,
        })?;
        opt_pi.step(&mut params.policy, &g.policy);
        if which == Trainable::All {
            if let (Some(opt), Some(theta), Some(grad)) = (&mut opt_next, &mut params.next, &g.next)
            {
                opt.step(theta, grad);
            }
            if let (Some(opt), Some(theta), Some(grad)) =
                (&mut opt_reward, &mut params.reward, &g.reward)
            {
                opt.step(theta, grad);
            }
        }
        let done = k + 1;
        if done % train.eval_every == 0 || done == train.episodes {
            let row = eval_row(train, unroll, &params, done)?;
            hook(&row, &params)?;
            if row.objective > best_objective || best_objective.is_nan() {
                (best, best_episode, best_objective) = (params.clone(), done, row.objective);
            }
            curve.push(row);
        }
    }
    Ok(TrainOutcome {
        params,
        best,
        best_episode,
        curve,
        objectives,
    })
}

/// Trains the policy; learned predictors, if any, stay fixed.
pub fn train_policy(
    train: &TrainConfig,
    unroll: &UnrollConfig,
    init: Params,
    hook: &mut EvalHook<'_>,
) -> Result<TrainOutcome, TrainError> {
    run(train, unroll, init, Trainable::Policy, hook)
}

/// Trains the policy and every learned predictor on the combined objective.
pub fn train_joint(
    train: &TrainConfig,
    unroll: &UnrollConfig,
    init: Params,
    hook: &mut EvalHook<'_>,
) -> Result<TrainOutcome, TrainError> {
    if !unroll.next_model.is_learned() && !unroll.reward_model.is_learned() {
        return Err(TrainError::Config(
            "joint training needs a learned predictor".into(),
        ));
    }
    run(train, unroll, init, Trainable::All, hook)
}
