//! Unrolling, BPTT and the training loops, checked against replay,
//! finite differences and plain simulator rollouts.

use predplan::envs::{AccConfig, EnvConfig, LineConfig, RoundaboutConfig};
use predplan::models::{Exploration, NetPolicy, NetSpec};
use predplan::trainer::unroll_episode;
use predplan::trainer::{
    evaluate, gradcheck_suite, gradient_check, init_params, policy_gradient, random_params,
    replay_objective, rollout, train_joint, train_policy, ModelSource, Params, Residuals,
    TrainConfig, Trainable, UnrollConfig, Unrolled,
};
use predplan::Seed;

fn analytic(env: EnvConfig, hidden: &[usize]) -> UnrollConfig {
    let policy = NetSpec::policy(&env, hidden).unwrap();
    UnrollConfig::analytic(env, policy)
}

fn acc() -> UnrollConfig {
    analytic(EnvConfig::Acc(AccConfig::default()), &[8, 8])
}

fn line() -> UnrollConfig {
    analytic(EnvConfig::Line(LineConfig::default()), &[2])
}

fn roundabout() -> UnrollConfig {
    analytic(EnvConfig::Roundabout(RoundaboutConfig::default()), &[8, 8])
}

/// Learned next-state and reward predictors with supervised terms and
/// exploration noise.
fn learned(mut cfg: UnrollConfig, lambda: f64) -> UnrollConfig {
    cfg.next_model = ModelSource::Learned(NetSpec::next_state(&cfg.env, &[8]).unwrap());
    cfg.reward_model = ModelSource::Learned(NetSpec::reward(&cfg.env, &[8]).unwrap());
    cfg.lambda_next = lambda;
    cfg.lambda_reward = lambda;
    cfg.exploration = Some(Exploration::default());
    cfg
}

fn short(mut cfg: UnrollConfig, horizon: usize) -> UnrollConfig {
    cfg.horizon = horizon;
    cfg
}

fn unroll(cfg: &UnrollConfig, params: &Params, seed: u64, which: Trainable) -> Unrolled {
    unroll_episode(cfg, params, Residuals::Live(Seed(seed)), which).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn all_configs() -> Vec<(&'static str, UnrollConfig)> {
    vec![
        ("acc", acc()),
        ("line", line()),
        ("roundabout", roundabout()),
        ("acc-learned", learned(acc(), 1.0)),
        ("roundabout-learned", learned(roundabout(), 1.0)),
    ]
}

#[test]
fn replay_is_bitwise_identical() {
    for (name, cfg) in all_configs() {
        let params = random_params(&cfg, Seed(3));
        let mut a = unroll(&cfg, &params, 21, Trainable::All);
        let mut b = unroll(&cfg, &params, 21, Trainable::All);
        assert_eq!(a.replay, b.replay, "{name}");
        assert_eq!(
            a.objective_value().to_bits(),
            b.objective_value().to_bits(),
            "{name}"
        );
        let ga = policy_gradient(&mut a).unwrap().flatten();
        let gb = policy_gradient(&mut b).unwrap().flatten();
        assert_eq!(bits(&ga), bits(&gb), "{name}");
    }
}

#[test]
fn replayed_objective_matches_live_one() {
    for (name, cfg) in all_configs() {
        let params = random_params(&cfg, Seed(4));
        let u = unroll(&cfg, &params, 22, Trainable::All);
        let replayed = replay_objective(&cfg, &params, &u.replay);
        assert_eq!(replayed.to_bits(), u.objective_value().to_bits(), "{name}");
    }
}

#[test]
fn bptt_matches_finite_differences() {
    for (name, cfg) in all_configs() {
        for horizon in [1, 10, 20] {
            let cfg = short(cfg.clone(), horizon);
            let which = if cfg.next_model.is_learned() {
                Trainable::All
            } else {
                Trainable::Policy
            };
            let summary = gradcheck_suite(&cfg, 3, Seed(5), which, 1e-6).unwrap();
            let max = summary.max_rel_error();
            assert!(max <= 1e-4, "{name} T={horizon}: {max:e}");
        }
    }
}

#[test]
fn simulator_outputs_are_blocked() {
    for (name, cfg) in all_configs() {
        let params = random_params(&cfg, Seed(6));
        let u = unroll(&cfg, &params, 23, Trainable::All);
        let leaves: Vec<_> = u
            .tape
            .node_ids()
            .filter(|&id| u.tape.op(id).is_none())
            .collect();
        let trainable = [Some(u.policy_leaf), u.next_leaf, u.reward_leaf];
        for id in leaves {
            if trainable.contains(&Some(id)) {
                continue;
            }
            // Frozen predictor copies and every simulator value are constants.
            assert!(
                !u.tape.depends_on_params(id),
                "{name}: leaf {id:?} is differentiable"
            );
        }
        // Each next state is ŝ + ν with ν a constant leaf.
        for r in &u.trace {
            for ((h, n), x) in r.s_hat.iter().zip(&r.nu).zip(&r.s_next) {
                assert_eq!(h + n, *x, "{name}");
            }
        }
    }
}

#[test]
fn analytic_unroll_follows_the_simulator_exactly() {
    for (name, cfg) in [
        ("acc", acc()),
        ("line", line()),
        ("roundabout", roundabout()),
    ] {
        let params = random_params(&cfg, Seed(7));
        let policy = NetPolicy {
            net: cfg.policy.clone(),
            theta: params.policy.clone(),
        };
        for episode in 0..5 {
            let seed = Seed(100 + episode);
            let u = unroll(&cfg, &params, seed.0, Trainable::Policy);
            let run = rollout(&cfg.env, &policy, seed).unwrap();
            assert_eq!(u.trace.len(), run.steps(), "{name}");
            for (t, r) in u.trace.iter().enumerate() {
                assert_eq!(bits(&r.s), bits(&run.states[t]), "{name} t={t}");
                assert_eq!(bits(&r.a), bits(&run.actions[t]), "{name} t={t}");
            }
            assert_eq!(
                bits(&u.trace.last().unwrap().s_next),
                bits(&run.final_state)
            );
            assert_eq!(
                u.true_return.to_bits(),
                run.total_reward().to_bits(),
                "{name}"
            );
        }
    }
}

#[test]
fn objective_equals_true_return_with_analytic_reward() {
    for (name, cfg) in [("acc", acc()), ("line", line())] {
        let params = random_params(&cfg, Seed(8));
        let policy = NetPolicy {
            net: cfg.policy.clone(),
            theta: params.policy.clone(),
        };
        let seed = Seed(9);
        let n = 20;
        let mut total = 0.0;
        for i in 0..n {
            let u = unroll_episode(
                &cfg,
                &params,
                Residuals::Live(seed.child(i)),
                Trainable::Policy,
            )
            .unwrap();
            let run = rollout(&cfg.env, &policy, seed.child(i)).unwrap();
            assert_eq!(
                u.objective_value(),
                run.total_reward(),
                "{name} episode {i}"
            );
            total += run.total_reward();
        }
        let metrics = evaluate(&cfg.env, &policy, n as usize, seed).unwrap();
        assert!(
            (metrics.mean_return - total / n as f64).abs() <= 1e-12,
            "{name}"
        );
    }
}

#[test]
fn single_step_objective_is_the_step_reward() {
    for (name, cfg) in [
        ("acc", acc()),
        ("line", line()),
        ("roundabout", roundabout()),
    ] {
        let cfg = short(cfg, 1);
        let params = random_params(&cfg, Seed(10));
        let u = unroll(&cfg, &params, 24, Trainable::Policy);
        assert_eq!(u.trace.len(), 1);
        let r = &u.trace[0];
        let expected = cfg.env.reward(&r.s, &r.a) + u.replay.steps[0].event_reward;
        assert_eq!(u.objective_value(), expected, "{name}");
    }
}

#[test]
fn zero_lambda_joint_gradient_equals_policy_only_gradient() {
    for (name, cfg) in [
        ("acc", learned(acc(), 0.0)),
        ("roundabout", learned(roundabout(), 0.0)),
    ] {
        let params = random_params(&cfg, Seed(11));
        let mut joint = unroll(&cfg, &params, 25, Trainable::All);
        let mut alone = unroll(&cfg, &params, 25, Trainable::Policy);
        let gj = policy_gradient(&mut joint).unwrap();
        let ga = policy_gradient(&mut alone).unwrap();
        assert_eq!(bits(&gj.policy), bits(&ga.policy), "{name}");
        // With no supervised terms the predictors get nothing.
        assert!(gj.next.unwrap().iter().all(|&g| g == 0.0), "{name}");
    }
}

#[test]
fn supervised_terms_are_nonnegative() {
    let cfg = learned(roundabout(), 1.0);
    for k in 0..5 {
        let params = random_params(&cfg, Seed(30 + k));
        let u = unroll(&cfg, &params, 40 + k, Trainable::All);
        assert!(u.next_loss >= 0.0 && u.reward_loss >= 0.0);
        // The objective is the predicted return minus the weighted terms.
        let rewards = replay_objective(
            &UnrollConfig {
                lambda_next: 0.0,
                lambda_reward: 0.0,
                ..cfg.clone()
            },
            &params,
            &u.replay,
        );
        assert!(u.objective_value() <= rewards + 1e-9);
    }
}

#[test]
fn zero_weight_acc_policy_gradient_is_finite_and_deterministic() {
    let cfg = acc();
    let params = Params::policy_only(vec![0.0; cfg.policy.mlp.num_params()]);
    let grad = |seed| {
        let mut u = unroll(&cfg, &params, seed, Trainable::Policy);
        policy_gradient(&mut u).unwrap().policy
    };
    let g = grad(26);
    assert!(g.iter().all(|v| v.is_finite()));
    assert!(g.iter().any(|&v| v != 0.0));
    assert_eq!(bits(&g), bits(&grad(26)));
}

#[test]
fn line_loss_beyond_the_threshold_reaches_the_earlier_action() {
    // Two rounds from s = 1.8 with a constant action a (the output bias of an
    // otherwise zero network). The adversary adds +0.5, so the second-round
    // loss is [0.3 + a]_+ and only counts once a > 1.5 − s = −0.3.
    let env = EnvConfig::Line(LineConfig {
        horizon: 2,
        init_range: (1.8, 1.8),
        ..LineConfig::default()
    });
    let cfg = analytic(env, &[2]);
    let n = cfg.policy.mlp.num_params();
    let grad_at = |a: f64| {
        let mut theta = vec![0.0; n];
        theta[n - 1] = a;
        let params = Params::policy_only(theta);
        let mut u = unroll(&cfg, &params, 1, Trainable::Policy);
        assert_eq!(u.trace[0].s, vec![1.8]);
        let g = policy_gradient(&mut u).unwrap().policy;
        (u.objective_value(), g[n - 1])
    };
    // a = −0.1: objective −(0.1·0.1 + 0.1·0.1 + 0.2), d/da = 0.2 − 1.
    let (obj, g) = grad_at(-0.1);
    assert!((obj + 0.22).abs() < 1e-12, "{obj}");
    assert!((g + 0.8).abs() < 1e-12, "{g}");
    // a = −0.5: the second round is inside the band; d/da = 0.2.
    let (obj, g) = grad_at(-0.5);
    assert!((obj + 0.1).abs() < 1e-12, "{obj}");
    assert!((g - 0.2).abs() < 1e-12, "{g}");
}

#[test]
fn gradient_check_catches_a_corrupted_adjoint() {
    use predplan::diff::AdjointFault;
    use predplan::trainer::gradcheck_suite_with_fault;
    let cfg = short(acc(), 10);
    let bad = gradcheck_suite_with_fault(
        &cfg,
        3,
        Seed(12),
        Trainable::Policy,
        1e-6,
        Some(AdjointFault::ScaleReluAdjoint(1.5)),
    )
    .unwrap();
    assert!(bad.max_rel_error() > 1e-2, "{:e}", bad.max_rel_error());
    let good = gradient_check(
        &cfg,
        &random_params(&cfg, Seed(13)),
        Seed(14),
        Trainable::Policy,
        1e-6,
    )
    .unwrap();
    assert!(good.rel_error <= 1e-4);
}

fn tiny_train(episodes: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        episodes,
        lr,
        model_lr: lr,
        eval_every: 5,
        eval_episodes: 3,
        seed: Seed(15),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_lr_leaves_parameters_untouched() {
    let cfg = learned(acc(), 1.0);
    let init = init_params(&cfg, Seed(16));
    let out = train_joint(&tiny_train(10, 0.0), &cfg, init.clone(), &mut |_, _| Ok(())).unwrap();
    assert_eq!(out.params, init);
    let cfg = line();
    let init = init_params(&cfg, Seed(17));
    let out = train_policy(&tiny_train(10, 0.0), &cfg, init.clone(), &mut |_, _| Ok(())).unwrap();
    assert_eq!(out.params, init);
}

#[test]
fn training_is_reproducible_and_records_a_curve() {
    let cfg = short(acc(), 30);
    let run = || {
        let mut seen = Vec::new();
        let out = train_policy(
            &tiny_train(12, 1e-3),
            &cfg,
            init_params(&cfg, Seed(18)),
            &mut |row, _| {
                seen.push(row.episode);
                Ok(())
            },
        )
        .unwrap();
        (out, seen)
    };
    let (a, seen) = run();
    let (b, _) = run();
    assert_eq!(a.params, b.params);
    assert_eq!(bits(&a.objectives), bits(&b.objectives));
    assert_eq!(seen, vec![0, 5, 10, 12]);
    assert_eq!(a.curve.len(), 4);
    assert_ne!(a.params, init_params(&cfg, Seed(18)));
    let best = a
        .curve
        .iter()
        .map(|r| r.objective)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen = a
        .curve
        .iter()
        .find(|r| r.episode == a.best_episode)
        .unwrap();
    assert_eq!(chosen.objective, best);
}

#[test]
fn evaluation_is_deterministic() {
    let cfg = roundabout();
    let params = random_params(&cfg, Seed(19));
    let policy = NetPolicy {
        net: cfg.policy.clone(),
        theta: params.policy,
    };
    let a = evaluate(&cfg.env, &policy, 8, Seed(20)).unwrap();
    let b = evaluate(&cfg.env, &policy, 8, Seed(20)).unwrap();
    // Compared bitwise: steps-to-exit is NaN when no episode exits.
    assert_eq!(a.column_names(), b.column_names());
    assert_eq!(bits(&a.column_values()), bits(&b.column_values()));
    assert!(evaluate(&cfg.env, &policy, 0, Seed(20)).is_err());
}
