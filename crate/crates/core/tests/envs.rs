//! Long randomized runs of every simulator against the invariants they
//! promise: exact decomposition, the shape of ν, clamps and determinism.

use predplan::envs::acc::{desired_gap, AccState};
use predplan::envs::roundabout::{DriverType, RoundaboutState, Target};
use predplan::envs::{residual, AccConfig, EnvConfig, LineConfig, LineEnv, RoundaboutConfig};
use predplan::Seed;
use rand::Rng;

const STEPS: usize = 10_000;

fn all_envs() -> Vec<EnvConfig> {
    vec![
        EnvConfig::Acc(AccConfig::default()),
        EnvConfig::Line(LineConfig::default()),
        EnvConfig::Roundabout(RoundaboutConfig::default()),
    ]
}

/// Visits `STEPS` transitions under random actions (a quarter of them
/// outside the action box), calling `visit(s, a, next)`.
fn random_steps(env: &EnvConfig, seed: Seed, mut visit: impl FnMut(&[f64], &[f64], &[f64], f64)) {
    let mut rng = seed.derive("actions").rng();
    let (lo, hi) = env.action_box();
    let mut done = 0;
    let mut episode = 0;
    while done < STEPS {
        let mut sim = env.reset(seed.child(episode)).unwrap();
        episode += 1;
        loop {
            let s = sim.state();
            let wide = rng.random::<f64>() < 0.25;
            let a: Vec<f64> = (0..env.action_dim())
                .map(|_| {
                    if wide {
                        rng.random_range(2.0 * lo..=2.0 * hi)
                    } else {
                        rng.random_range(lo..=hi)
                    }
                })
                .collect();
            let tr = sim.step(&a);
            visit(&s, &a, &tr.next, tr.reward);
            done += 1;
            if tr.done || done >= STEPS {
                break;
            }
        }
    }
}

#[test]
fn decomposition_is_exact() {
    for env in all_envs() {
        let mut worst = 0.0f64;
        random_steps(&env, Seed(11), |s, a, next, _| {
            let s_hat = env.predictable(s, a);
            let nu = residual(next, &s_hat);
            for ((h, n), x) in s_hat.iter().zip(&nu).zip(next) {
                worst = worst.max((h + n - x).abs());
            }
        });
        assert!(
            worst <= 1e-12,
            "{:?}: worst reconstruction error {worst:e}",
            env.kind()
        );
    }
}

#[test]
fn residual_touches_only_unpredictable_components() {
    for env in all_envs() {
        let unpredictable = |i: usize| match &env {
            EnvConfig::Acc(_) => i == 0,
            EnvConfig::Line(_) => true,
            // Host (position, velocity), then (position, velocity, acceleration) per target.
            EnvConfig::Roundabout(_) => i >= 2 && (i - 2) % 3 == 2,
        };
        let mut seen_nonzero = false;
        random_steps(&env, Seed(12), |s, a, next, _| {
            let nu = residual(next, &env.predictable(s, a));
            for (i, v) in nu.iter().enumerate() {
                if unpredictable(i) {
                    seen_nonzero |= *v != 0.0;
                } else {
                    assert!(v.abs() <= 1e-12, "{:?}: ν[{i}] = {v}", env.kind());
                }
            }
        });
        assert!(seen_nonzero, "{:?}: ν was identically zero", env.kind());
    }
}

#[test]
fn acc_states_stay_nonnegative_and_desired_gap_at_least_one() {
    let env = EnvConfig::Acc(AccConfig::default());
    random_steps(&env, Seed(13), |s, _, next, _| {
        assert!(next.iter().all(|&v| v >= 0.0), "{next:?}");
        assert!(desired_gap(AccState::from_slice(s).v_host) >= 1.0);
    });
}

#[test]
fn line_residual_bounded() {
    let env = EnvConfig::Line(LineConfig::default());
    random_steps(&env, Seed(14), |s, a, next, _| {
        let nu = next[0] - (s[0] + a[0]);
        assert!(nu.abs() <= 0.5 + 1e-12, "ν = {nu}");
    });
}

#[test]
fn line_adversary_walks_away_from_zero() {
    let cfg = LineConfig::default();
    let mut sim = LineEnv::from_state(0.0, &cfg);
    for t in 1..=cfg.horizon {
        sim.step(0.0);
        assert_eq!(sim.state().abs(), 0.5 * t as f64);
    }
}

#[test]
fn roundabout_accelerations_bounded_and_velocities_nonnegative() {
    let cfg = RoundaboutConfig::default();
    let env = EnvConfig::Roundabout(cfg.clone());
    random_steps(&env, Seed(15), |_, _, next, _| {
        assert!(next[1] >= 0.0);
        for k in 0..cfg.n_targets {
            let at = 2 + 3 * k;
            assert!(next[at + 1] >= 0.0);
            assert!(next[at + 2].abs() <= cfg.a_max + 1e-12);
        }
    });
}

#[test]
fn same_seed_same_actions_same_trajectory() {
    for env in all_envs() {
        let trace = || {
            let mut out = Vec::new();
            random_steps(&env, Seed(16), |s, a, next, r| {
                out.extend(s.iter().chain(a).chain(next).map(|v| v.to_bits()));
                out.push(r.to_bits());
            });
            out
        };
        assert_eq!(trace(), trace(), "{:?}", env.kind());
    }
}

#[test]
fn different_seeds_differ() {
    for env in all_envs() {
        let a = env.reset(Seed(1)).unwrap().state();
        let b = env.reset(Seed(2)).unwrap().state();
        assert_ne!(a, b, "{:?}", env.kind());
    }
}

#[test]
fn roundabout_observation_hides_driver_types() {
    let target = |driver| Target {
        position: -10.0,
        velocity: 7.0,
        acceleration: 0.5,
        cruise: 8.0,
        driver,
    };
    let observe = |driver| {
        RoundaboutState {
            host_position: -20.0,
            host_velocity: 3.0,
            targets: vec![target(driver); 3],
        }
        .observe()
    };
    assert_eq!(
        observe(DriverType::Aggressive),
        observe(DriverType::Defensive)
    );
}
