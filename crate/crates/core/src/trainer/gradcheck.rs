use rand::Rng;

use crate::diff::{finite_diff_grad, relative_error, AdjointFault};
use crate::models::NetSpec;
use crate::rng::Seed;

use super::train::{init_params, policy_gradient};
use super::unroll::{
    replay_objective_split, unroll_episode, ModelSource, Params, Residuals, Trainable, UnrollConfig,
};
use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub rel_error: f64,
    /// Closest approach of any parameter-dependent node to a kink.
    pub kink_margin: f64,
    pub n_params: usize,
    pub steps: usize,
}

/// Compares the BPTT gradient of one episode against central differences of
/// the same episode replayed with its residuals frozen.
pub fn gradient_check(
    cfg: &UnrollConfig,
    params: &Params,
    episode: Seed,
    which: Trainable,
    eps: f64,
) -> Result<GradcheckResult, TrainError> {
    check_one(cfg, params, episode, which, eps, None)
}

fn check_one(
    cfg: &UnrollConfig,
    params: &Params,
    episode: Seed,
    which: Trainable,
    eps: f64,
    fault: Option<AdjointFault>,
) -> Result<GradcheckResult, TrainError> {
    let mut live = unroll_episode(cfg, params, Residuals::Live(episode), which)?;
    live.tape.set_fault(fault);
    let kink_margin = live.tape.min_kink_margin();
    let grad = policy_gradient(&mut live)?.flatten();
    let replay = live.replay.clone();

    let n_pi = params.policy.len();
    let n_next = if which == Trainable::All {
        params.next.as_ref().map_or(0, Vec::len)
    } else {
        0
    };
    let mut flat = params.policy.clone();
    if which == Trainable::All {
        flat.extend(params.next.iter().flatten());
        flat.extend(params.reward.iter().flatten());
    }
    let unflatten = |theta: &[f64]| {
        let mut p = params.clone();
        p.policy = theta[..n_pi].to_vec();
        if which == Trainable::All {
            let mut at = n_pi;
            if let Some(next) = &mut p.next {
                *next = theta[at..at + n_next].to_vec();
                at += n_next;
            }
            if let Some(reward) = &mut p.reward {
                *reward = theta[at..].to_vec();
            }
        }
        p
    };
    // Predictors are frozen on the planning path, so only the policy part of
    // a perturbation reaches it.
    let fd = finite_diff_grad(
        |theta| {
            let fit = unflatten(theta);
            let chain = Params {
                policy: fit.policy.clone(),
                ..params.clone()
            };
            replay_objective_split(cfg, &chain, &fit, &replay)
        },
        &flat,
        eps,
    );
    Ok(GradcheckResult {
        rel_error: relative_error(&grad, &fd),
        kink_margin,
        n_params: flat.len(),
        steps: replay.steps.len(),
    })
}

/// Glorot weights plus small random biases, so that no unit sits at a kink
/// by construction.
pub fn random_params(cfg: &UnrollConfig, seed: Seed) -> Params {
    let mut p = init_params(cfg, seed);
    let mut rng = seed.derive("bias").rng();
    let mut jitter = |theta: &mut Vec<f64>, net: &NetSpec| {
        for ((_, b_at), (_, o)) in net.mlp.offsets().into_iter().zip(net.mlp.layers()) {
            for v in &mut theta[b_at..b_at + o] {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    };
    jitter(&mut p.policy, &cfg.policy);
    if let (Some(theta), ModelSource::Learned(net)) = (&mut p.next, &cfg.next_model) {
        jitter(theta, net);
    }
    if let (Some(theta), ModelSource::Learned(net)) = (&mut p.reward, &cfg.reward_model) {
        jitter(theta, net);
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    pub results: Vec<GradcheckResult>,
    /// Draws rejected for sitting too close to a kink.
    pub rejected: usize,
}

impl GradcheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }
}

/// Checks `n` random parameter draws. Draws whose unrolled graph passes
/// within `100·eps` of a kink are replaced by fresh ones.
pub fn gradcheck_suite(
    cfg: &UnrollConfig,
    n: usize,
    seed: Seed,
    which: Trainable,
    eps: f64,
) -> Result<GradcheckSummary, TrainError> {
    gradcheck_suite_with_fault(cfg, n, seed, which, eps, None)
}

/// [`gradcheck_suite`] with a corrupted adjoint rule, as a negative control.
#[doc(hidden)]
pub fn gradcheck_suite_with_fault(
    cfg: &UnrollConfig,
    n: usize,
    seed: Seed,
    which: Trainable,
    eps: f64,
    fault: Option<AdjointFault>,
) -> Result<GradcheckSummary, TrainError> {
    let mut results = Vec::new();
    let mut rejected = 0;
    let mut draw = 0u64;
    while results.len() < n {
        let s = seed.child(draw);
        draw += 1;
        let params = random_params(cfg, s.derive("theta"));
        let probe = unroll_episode(cfg, &params, Residuals::Live(s.derive("episode")), which)?;
        if probe.tape.min_kink_margin() < 100.0 * eps {
            rejected += 1;
            if rejected > 10 * n + 10 {
                return Err(TrainError::Config(
                    "could not find kink-free parameters".into(),
                ));
            }
            continue;
        }
        results.push(check_one(
            cfg,
            &params,
            s.derive("episode"),
            which,
            eps,
            fault,
        )?);
    }
    Ok(GradcheckSummary { results, rejected })
}
