use crate::diff::ParamVector;
use crate::rng::Seed;

use super::data::{shuffle, Dataset};
use super::mlp::{forward_cached, mlp_init};
use super::net::NetSpec;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub holdout: f64,
    /// Fraction of the final epochs over which the step size falls
    /// linearly to zero; 0 keeps it constant.
    pub anneal: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            momentum: 0.9,
            batch: 64,
            epochs: 40,
            holdout: 0.1,
            anneal: 0.0,
        }
    }
}

/// Mean squared error per target element, in the net's output-map units
/// (`(y − target) / scale`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

/// Mean over elements of `((net(x) − y) / norm)²`.
pub fn mse(net: &NetSpec, theta: &[f64], data: &Dataset, norm: &[f64]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let p = net.eval(theta, x);
        for ((p, y), n) in p.iter().zip(y).zip(norm) {
            total += ((p - y) / n).powi(2);
        }
    }
    total / (data.len() * net.output_dim()) as f64
}

/// Minibatch SGD with momentum on the mean of `‖(net(x) − y) / scale‖²`,
/// starting from Glorot init.
pub fn fit_regression(
    data: &Dataset,
    net: &NetSpec,
    cfg: &FitConfig,
    seed: Seed,
) -> Result<(ParamVector, FitReport), ModelError> {
    let init = mlp_init(&net.mlp, seed.derive("init"));
    fit_regression_from(data, net, init, cfg, seed)
}

pub fn fit_regression_from(
    data: &Dataset,
    net: &NetSpec,
    init: ParamVector,
    cfg: &FitConfig,
    seed: Seed,
) -> Result<(ParamVector, FitReport), ModelError> {
    if data.is_empty() {
        return Err(ModelError::Data("empty dataset".into()));
    }
    if let Some(bad) = data.inputs.iter().position(|x| x.len() != net.input_dim()) {
        return Err(ModelError::Dimension(format!(
            "input {bad} has wrong length"
        )));
    }
    if let Some(bad) = data
        .targets
        .iter()
        .position(|y| y.len() != net.output_dim())
    {
        return Err(ModelError::Dimension(format!(
            "target {bad} has wrong length"
        )));
    }
    if !(cfg.lr >= 0.0 && cfg.batch > 0 && (0.0..=1.0).contains(&cfg.anneal)) {
        return Err(ModelError::Spec(format!("bad fit config {cfg:?}")));
    }
    let (train, held) = data.split(cfg.holdout, seed.derive("split"));
    if train.is_empty() {
        return Err(ModelError::Data("no training pairs after split".into()));
    }

    // Work in raw MLP coordinates: normalised input, raw target.
    let xs: Vec<Vec<f64>> = train
        .inputs
        .iter()
        .map(|x| net.normalize_input(x))
        .collect();
    let zs: Vec<Vec<f64>> = train
        .inputs
        .iter()
        .zip(&train.targets)
        .map(|(x, y)| net.raw_target(x, y))
        .collect();

    let mut theta = init.values().to_vec();
    let mut velocity = vec![0.0; theta.len()];
    let mut grad = vec![0.0; theta.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let shuffle_seed = seed.derive("shuffle");
    let n_batches = train.len().div_ceil(cfg.batch);
    let total_steps = (cfg.epochs * n_batches) as f64;
    let anneal_steps = cfg.anneal * total_steps;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut shuffle_seed.child(epoch as u64).rng());
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let acts = forward_cached(&net.mlp, &theta, &xs[i]);
                let d_out: Vec<f64> = acts
                    .output()
                    .iter()
                    .zip(&zs[i])
                    .map(|(p, t)| {
                        loss += (p - t) * (p - t) * inv;
                        2.0 * (p - t) * inv
                    })
                    .collect();
                acts.backward(&net.mlp, &theta, &d_out, &mut grad);
            }
            if !loss.is_finite() {
                return Err(ModelError::NonFinite(format!(
                    "fit loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            let left = total_steps - step as f64;
            let lr = if left < anneal_steps {
                cfg.lr * left / anneal_steps
            } else {
                cfg.lr
            };
            step += 1;
            for ((t, v), g) in theta.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *t -= lr * *v;
            }
        }
    }

    let unit = net.output.scale().to_vec();
    let report = FitReport {
        train_mse: mse(net, &theta, &train, &unit),
        heldout_mse: mse(net, &theta, &held, &unit),
        n_train: train.len(),
        n_heldout: held.len(),
    };
    Ok((init.with_values(theta), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{relative_error, Tape};
    use crate::envs::Scaling;
    use crate::models::{MlpNodes, MlpSpec, OutputMap};
    use rand::Rng;

    fn unit_net(input: usize, hidden: &[usize], output: usize) -> NetSpec {
        NetSpec::new(
            MlpSpec::new(input, hidden, output).unwrap(),
            Scaling::identity(input),
            OutputMap::Affine {
                center: vec![0.0; output],
                scale: vec![1.0; output],
            },
        )
        .unwrap()
    }

    fn linear_data(n: usize, seed: u64) -> Dataset {
        let mut rng = Seed(seed).rng();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            targets.push(vec![
                0.5 * x[0] - 0.3 * x[1] + 0.2 * x[2] + 0.1,
                -0.4 * x[0] + 0.6 * x[2],
            ]);
            inputs.push(x);
        }
        Dataset::new(inputs, targets)
    }

    #[test]
    fn learns_a_linear_map() {
        let data = linear_data(4000, 1);
        let net = unit_net(3, &[32], 2);
        let cfg = FitConfig {
            lr: 0.02,
            epochs: 60,
            batch: 32,
            ..FitConfig::default()
        };
        let (_, report) = fit_regression(&data, &net, &cfg, Seed(2)).unwrap();
        assert!(report.heldout_mse <= 1e-4, "{report:?}");
    }

    #[test]
    fn annealed_fit_still_learns() {
        let data = linear_data(4000, 1);
        let net = unit_net(3, &[32], 2);
        let cfg = FitConfig {
            lr: 0.02,
            epochs: 60,
            batch: 32,
            anneal: 1.0,
            ..FitConfig::default()
        };
        let (_, report) = fit_regression(&data, &net, &cfg, Seed(2)).unwrap();
        assert!(report.heldout_mse <= 1e-4, "{report:?}");
    }

    #[test]
    fn anneal_outside_unit_interval_is_rejected() {
        let data = linear_data(50, 1);
        let net = unit_net(3, &[4], 2);
        let cfg = FitConfig {
            anneal: 1.5,
            ..FitConfig::default()
        };
        assert!(matches!(
            fit_regression(&data, &net, &cfg, Seed(1)),
            Err(ModelError::Spec(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = linear_data(50, 1);
        let net = unit_net(3, &[4], 2);
        let cfg = FitConfig {
            epochs: 0,
            ..FitConfig::default()
        };
        let (theta, _) = fit_regression(&data, &net, &cfg, Seed(7)).unwrap();
        assert_eq!(theta, mlp_init(&net.mlp, Seed(7).derive("init")));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let data = linear_data(200, 1);
        let net = unit_net(3, &[4], 2);
        let cfg = FitConfig {
            lr: 0.0,
            epochs: 3,
            ..FitConfig::default()
        };
        let (theta, _) = fit_regression(&data, &net, &cfg, Seed(7)).unwrap();
        assert_eq!(theta, mlp_init(&net.mlp, Seed(7).derive("init")));
    }

    #[test]
    fn full_batch_step_follows_tape_gradient() {
        let data = linear_data(40, 3);
        let net = unit_net(3, &[5], 2);
        let lr = 0.05;
        let cfg = FitConfig {
            lr,
            epochs: 1,
            batch: 1000,
            holdout: 0.0,
            ..FitConfig::default()
        };
        let init = mlp_init(&net.mlp, Seed(4));
        let (after, _) = fit_regression_from(&data, &net, init.clone(), &cfg, Seed(0)).unwrap();

        let mut t = Tape::new();
        let nodes = MlpNodes::bind(&mut t, &net.mlp, init.values()).unwrap();
        let mut terms = Vec::new();
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let xn = t.leaf_blocked(x);
            let yn = t.leaf_blocked(y);
            let p = net.forward(&mut t, &nodes, xn).unwrap();
            terms.push(t.sq_diff(p, yn).unwrap());
        }
        let all = t.concat(&terms).unwrap();
        let total = t.sum(all).unwrap();
        let mean = t.scale(1.0 / data.len() as f64, total).unwrap();
        let g = t.backward(mean).unwrap();
        let step: Vec<f64> = init
            .values()
            .iter()
            .zip(after.values())
            .map(|(a, b)| (a - b) / lr)
            .collect();
        assert!(relative_error(&step, g.get(nodes.theta).unwrap()) < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let net = unit_net(3, &[4], 2);
        assert!(fit_regression(&Dataset::default(), &net, &FitConfig::default(), Seed(0)).is_err());
        let bad = Dataset::new(vec![vec![1.0]], vec![vec![1.0, 2.0]]);
        assert!(matches!(
            fit_regression(&bad, &net, &FitConfig::default(), Seed(0)),
            Err(ModelError::Dimension(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = linear_data(200, 1);
        let net = unit_net(3, &[16, 16], 2);
        let cfg = FitConfig {
            lr: 1e3,
            epochs: 50,
            ..FitConfig::default()
        };
        assert!(matches!(
            fit_regression(&data, &net, &cfg, Seed(0)),
            Err(ModelError::NonFinite(_))
        ));
    }
}
