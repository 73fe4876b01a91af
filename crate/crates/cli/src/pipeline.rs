use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use predplan::diff::AdjointFault;
use predplan::envs::line::line_optimal_action;
use predplan::envs::{write_trajectory_csv, DriverType, EnvConfig, EnvKind};
use predplan::models::{
    checkpoint_to_string, collect, fit_regression, mse, Controller, Dataset, FitConfig, FitReport,
    FnPolicy, NetPolicy, NetSpec, UniformPolicy, ZeroPolicy,
};
use predplan::trainer::scenarios::{run_merge, single_target_scenarios, MergeResult};
use predplan::trainer::{
    evaluate, gradcheck_suite_with_fault, init_params, train_joint, train_policy, unroll_episode,
    CurveRow, GradcheckSummary, Metrics, ModelSource, Params, Residuals, TrainConfig, TrainError,
    Trainable, UnrollConfig,
};
use predplan::Seed;

use crate::config::{Experiment, ExperimentConfig};
use crate::CliError;

/// Largest accepted relative error between BPTT and finite differences.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Per-purpose random streams, all derived from the root seed by label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub root: Seed,
}

impl Streams {
    pub fn new(root: u64) -> Self {
        Self { root: Seed(root) }
    }

    /// Training episodes (`train.child(k)`) and learning-curve evaluation
    /// (`eval.child(i)`) are derived from this one inside the trainer.
    pub fn train(self) -> Seed {
        self.root
    }

    pub fn init(self) -> Seed {
        self.root.derive("init")
    }

    pub fn collect(self) -> Seed {
        self.root.derive("collect")
    }

    pub fn fit(self, model: &str) -> Seed {
        self.root.derive("fit").derive(model)
    }

    pub fn final_eval(self) -> Seed {
        self.root.derive("final-eval")
    }

    pub fn trajectory(self) -> Seed {
        self.root.derive("trajectory")
    }

    pub fn gradcheck(self) -> Seed {
        self.root.derive("gradcheck")
    }
}

/// Supervised fit of one predictor. Errors are means over target elements.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub model: &'static str,
    pub n_train: usize,
    pub n_heldout: usize,
    pub train_mse: f64,
    pub heldout_mse: f64,
    /// Held-out error with each component divided by its normaliser: state
    /// half-widths for the next state, the target std for the reward.
    pub heldout_mse_normalized: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub curve: Vec<CurveRow>,
    /// Final evaluation, trained policy first, then baselines.
    pub eval: Vec<(String, Metrics)>,
    pub fits: Vec<FitRow>,
    pub merges: Vec<MergeResult>,
    /// The evaluated policy (and predictors): the best curve checkpoint or
    /// the last iterate, per `train.keep_best`.
    pub params: Params,
    pub params_episode: usize,
    pub last: Params,
}

impl RunReport {
    pub fn eval_of(&self, controller: &str) -> Option<&Metrics> {
        self.eval
            .iter()
            .find(|(n, _)| n == controller)
            .map(|(_, m)| m)
    }
}

fn policy_net(cfg: &ExperimentConfig) -> Result<NetSpec, CliError> {
    Ok(NetSpec::policy(&cfg.env, &cfg.policy_hidden)?)
}

/// Unroll settings for an experiment. `reward_net` overrides the default
/// learned reward head (used once its output scaling is known from data).
fn unroll_config(
    cfg: &ExperimentConfig,
    reward_net: Option<NetSpec>,
) -> Result<UnrollConfig, CliError> {
    let mut u = UnrollConfig::analytic(cfg.env.clone(), policy_net(cfg)?);
    match cfg.experiment {
        Experiment::AccLearned => {
            u.next_model = ModelSource::Learned(NetSpec::next_state(&cfg.env, &cfg.model_hidden)?);
            let reward = match reward_net {
                Some(net) => net,
                None => NetSpec::reward(&cfg.env, &cfg.model_hidden)?,
            };
            u.reward_model = ModelSource::Learned(reward);
        }
        Experiment::RoundaboutJoint => {
            u.next_model = ModelSource::Learned(NetSpec::next_state(&cfg.env, &cfg.model_hidden)?);
            u.lambda_next = cfg.train.lambda_next;
            u.exploration = Some(cfg.explore);
        }
        _ => {}
    }
    Ok(u)
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        episodes: t.episodes,
        lr: t.lr,
        model_lr: t.model_lr,
        momentum: t.momentum,
        clip: t.clip,
        eval_every: t.eval_every,
        eval_episodes: t.eval_episodes,
        seed: Streams::new(cfg.seed).train(),
    }
}

fn csv_row(fields: impl IntoIterator<Item = String>) -> String {
    fields.into_iter().collect::<Vec<_>>().join(",")
}

fn write_file(path: &Path, text: &str) -> io::Result<()> {
    fs::write(path, text)
}

/// Fits on a deterministic split and reports errors on the held-out part.
fn fit_one(
    model: &'static str,
    data: &Dataset,
    net: &NetSpec,
    fit: &FitConfig,
    norm: &[f64],
    seed: Seed,
) -> Result<(Vec<f64>, FitRow), CliError> {
    let (train, held) = data.split(fit.holdout, seed.derive("split"));
    let cfg = FitConfig {
        holdout: 0.0,
        ..*fit
    };
    let (theta, _): (_, FitReport) = fit_regression(&train, net, &cfg, seed)?;
    let theta = theta.into_values();
    let ones = vec![1.0; norm.len()];
    let heldout_mse = mse(net, &theta, &held, &ones);
    if !heldout_mse.is_finite() {
        return Err(
            TrainError::Model(predplan::models::ModelError::NonFinite(format!(
                "{model} fit diverged"
            )))
            .into(),
        );
    }
    let row = FitRow {
        model,
        n_train: train.len(),
        n_heldout: held.len(),
        train_mse: mse(net, &theta, &train, &ones),
        heldout_mse,
        heldout_mse_normalized: mse(net, &theta, &held, norm),
    };
    Ok((theta, row))
}

fn write_fit_csv(path: &Path, rows: &[FitRow]) -> io::Result<()> {
    let mut out =
        String::from("model,n_train,n_heldout,train_mse,heldout_mse,heldout_mse_normalized\n");
    for r in rows {
        out.push_str(&csv_row([
            r.model.to_string(),
            r.n_train.to_string(),
            r.n_heldout.to_string(),
            r.train_mse.to_string(),
            r.heldout_mse.to_string(),
            r.heldout_mse_normalized.to_string(),
        ]));
        out.push('\n');
    }
    write_file(path, &out)
}

/// Writes the learning curve row by row, so that a run that fails part way
/// keeps what it had.
struct CurveWriter {
    out: BufWriter<File>,
    header: bool,
}

impl CurveWriter {
    fn create(path: &Path) -> io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            header: false,
        })
    }

    fn push(&mut self, row: &CurveRow) -> io::Result<()> {
        if !self.header {
            let mut names = vec!["episode", "objective", "next_loss", "reward_loss"];
            names.extend(row.metrics.column_names());
            writeln!(self.out, "{}", names.join(","))?;
            self.header = true;
        }
        let mut fields = vec![
            row.episode.to_string(),
            row.objective.to_string(),
            row.next_loss.to_string(),
            row.reward_loss.to_string(),
        ];
        fields.extend(row.metrics.column_values().iter().map(f64::to_string));
        writeln!(self.out, "{}", csv_row(fields))?;
        self.out.flush()
    }
}

fn write_checkpoints(
    dir: &Path,
    tag: &str,
    unroll: &UnrollConfig,
    params: &Params,
) -> io::Result<()> {
    write_file(
        &dir.join(format!("policy-{tag}.txt")),
        &checkpoint_to_string(&unroll.policy.mlp, &params.policy),
    )?;
    for (src, theta, name) in [
        (&unroll.next_model, &params.next, "next"),
        (&unroll.reward_model, &params.reward, "reward"),
    ] {
        if let (ModelSource::Learned(net), Some(theta)) = (src, theta) {
            write_file(
                &dir.join(format!("{name}-{tag}.txt")),
                &checkpoint_to_string(&net.mlp, theta),
            )?;
        }
    }
    Ok(())
}

fn write_eval_csv(path: &Path, rows: &[(String, Metrics)]) -> io::Result<()> {
    let mut names = vec!["controller", "episodes"];
    names.extend(rows[0].1.column_names());
    let mut out = names.join(",");
    out.push('\n');
    for (name, m) in rows {
        let mut fields = vec![name.clone(), m.episodes.to_string()];
        fields.extend(m.column_values().iter().map(f64::to_string));
        out.push_str(&csv_row(fields));
        out.push('\n');
    }
    write_file(path, &out)
}

fn write_line_comparison(path: &Path, rows: &[(String, Metrics)]) -> io::Result<String> {
    let loss = |name: &str| {
        rows.iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, m)| m.get("mean_step_loss"))
            .unwrap_or(f64::NAN)
    };
    let optimal = loss("optimal");
    let mut out = String::from("controller,mean_step_loss,ratio_to_optimal\n");
    for (name, _) in rows {
        let l = loss(name);
        out.push_str(&csv_row([
            name.clone(),
            l.to_string(),
            (l / optimal).to_string(),
        ]));
        out.push('\n');
    }
    write_file(path, &out)?;
    Ok(out)
}

fn write_merge_csv(path: &Path, merges: &[MergeResult]) -> io::Result<()> {
    let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out =
        String::from("scenario,driver,host_cross_step,target_cross_step,host_first,outcome\n");
    for m in merges {
        out.push_str(&csv_row([
            m.scenario.to_string(),
            format!("{:?}", m.driver).to_lowercase(),
            opt(m.host_cross),
            opt(m.target_cross),
            m.host_first().map(|b| b.to_string()).unwrap_or_default(),
            m.outcome
                .map(|o| format!("{o:?}").to_lowercase())
                .unwrap_or_default(),
        ]));
        out.push('\n');
    }
    write_file(path, &out)
}

fn baselines(env: &EnvConfig, untrained: NetPolicy) -> Vec<(String, Box<dyn Controller>)> {
    let mut out: Vec<(String, Box<dyn Controller>)> = vec![
        ("untrained".into(), Box::new(untrained)),
        (
            "zero".into(),
            Box::new(ZeroPolicy {
                action_dim: env.action_dim(),
            }),
        ),
        ("random".into(), Box::new(UniformPolicy::for_env(env))),
    ];
    if env.kind() == EnvKind::Line {
        out.push((
            "optimal".into(),
            Box::new(FnPolicy {
                name: "closed-form optimum".into(),
                f: |s: &[f64]| vec![line_optimal_action(s[0])],
            }),
        ));
    }
    out
}

/// Runs the experiment and writes its artifacts into `out`:
/// `manifest.txt`, `curve.csv`, `eval.csv`, `trajectory.csv`,
/// `checkpoints/`, plus `fit.csv` (learned ACC models),
/// `comparison.csv` (line game) and `merges.csv` (roundabout).
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    write_file(&out.join("manifest.txt"), &cfg.manifest())?;

    let env = &cfg.env;
    let mut fits = Vec::new();
    let (unroll, init) = if cfg.experiment == Experiment::AccLearned {
        let behavior = ZeroPolicy {
            action_dim: env.action_dim(),
        };
        let data = collect(
            env,
            &behavior,
            cfg.explore,
            cfg.fit_samples,
            streams.collect(),
        )?;
        let next_data = data.next_state_data();
        let reward_data = data.reward_data();
        let next_net = NetSpec::next_state(env, &cfg.model_hidden)?;
        let reward_net = NetSpec::reward(env, &cfg.model_hidden)?.standardized_for(&reward_data)?;
        let (next_theta, next_row) = fit_one(
            "next",
            &next_data,
            &next_net,
            &cfg.fit,
            &env.state_scaling().half_width,
            streams.fit("next"),
        )?;
        let (reward_theta, reward_row) = fit_one(
            "reward",
            &reward_data,
            &reward_net,
            &cfg.fit,
            &reward_data.target_std(),
            streams.fit("reward"),
        )?;
        fits = vec![next_row, reward_row];
        write_fit_csv(&out.join("fit.csv"), &fits)?;
        let unroll = unroll_config(cfg, Some(reward_net))?;
        let mut init = init_params(&unroll, streams.init());
        init.next = Some(next_theta);
        init.reward = Some(reward_theta);
        (unroll, init)
    } else {
        let unroll = unroll_config(cfg, None)?;
        let init = init_params(&unroll, streams.init());
        (unroll, init)
    };
    let untrained = NetPolicy {
        net: unroll.policy.clone(),
        theta: init.policy.clone(),
    };

    let train = train_config(cfg);
    let mut curve_out = CurveWriter::create(&out.join("curve.csv"))?;
    let mut io_error: Option<io::Error> = None;
    let mut hook = |row: &CurveRow, params: &Params| -> Result<(), TrainError> {
        let res = curve_out.push(row).and_then(|()| {
            write_checkpoints(&ckpt_dir, &format!("{:06}", row.episode), &unroll, params)
        });
        println!(
            "episode {:>6}  objective {:>12.4}  {}",
            row.episode,
            row.objective,
            row.metrics
                .column_names()
                .iter()
                .zip(row.metrics.column_values())
                .map(|(k, v)| format!("{k} {v:.4}"))
                .collect::<Vec<_>>()
                .join("  ")
        );
        res.map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            TrainError::Config(msg)
        })
    };
    let trained = if cfg.experiment == Experiment::RoundaboutJoint {
        train_joint(&train, &unroll, init, &mut hook)
    } else {
        train_policy(&train, &unroll, init, &mut hook)
    };
    let outcome = match (trained, io_error) {
        (Ok(o), _) => o,
        (Err(_), Some(e)) => return Err(e.into()),
        (Err(e), None) => return Err(e.into()),
    };
    write_checkpoints(&ckpt_dir, "last", &unroll, &outcome.params)?;
    let (chosen, chosen_episode) = if cfg.train.keep_best {
        (outcome.best.clone(), outcome.best_episode)
    } else {
        (outcome.params.clone(), cfg.train.episodes)
    };
    write_checkpoints(&ckpt_dir, "final", &unroll, &chosen)?;
    println!("final policy from episode {chosen_episode}");

    let policy = NetPolicy {
        net: unroll.policy.clone(),
        theta: chosen.policy.clone(),
    };
    let eval_seed = streams.final_eval();
    let mut eval = vec![(
        "trained".to_string(),
        evaluate(env, &policy, cfg.eval_episodes, eval_seed)?,
    )];
    for (name, ctl) in baselines(env, untrained) {
        eval.push((
            name,
            evaluate(env, ctl.as_ref(), cfg.eval_episodes, eval_seed)?,
        ));
    }
    write_eval_csv(&out.join("eval.csv"), &eval)?;
    for (name, m) in &eval {
        println!(
            "eval {name:<10} {}",
            m.column_names()
                .iter()
                .zip(m.column_values())
                .map(|(k, v)| format!("{k} {v:.4}"))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }

    let traj_cfg = UnrollConfig {
        exploration: None,
        ..unroll.clone()
    };
    let mut episodes = Vec::with_capacity(cfg.trajectories);
    for i in 0..cfg.trajectories {
        let u = unroll_episode(
            &traj_cfg,
            &chosen,
            Residuals::Live(streams.trajectory().child(i as u64)),
            Trainable::Policy,
        )?;
        episodes.push((i, u.trace));
    }
    let mut traj = BufWriter::new(File::create(out.join("trajectory.csv"))?);
    write_trajectory_csv(&mut traj, &episodes)?;
    traj.flush()?;

    if env.kind() == EnvKind::Line {
        let table = write_line_comparison(&out.join("comparison.csv"), &eval)?;
        print!("{table}");
    }
    let mut merges = Vec::new();
    if let EnvConfig::Roundabout(rc) = env {
        for sc in single_target_scenarios() {
            for driver in [DriverType::Aggressive, DriverType::Defensive] {
                merges.push(run_merge(rc, &policy, &sc, driver));
            }
        }
        write_merge_csv(&out.join("merges.csv"), &merges)?;
    }

    Ok(RunReport {
        curve: outcome.curve,
        eval,
        fits,
        merges,
        params: chosen,
        params_episode: chosen_episode,
        last: outcome.params,
    })
}

/// BPTT against central differences on `gradcheck.draws` random parameter
/// draws, over `gradcheck.horizon` steps.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckSummary, CliError> {
    cfg.validate()?;
    let mut unroll = unroll_config(cfg, None)?;
    unroll.horizon = cfg.gradcheck.horizon;
    let which = if cfg.experiment == Experiment::RoundaboutJoint {
        Trainable::All
    } else {
        Trainable::Policy
    };
    let fault = cfg
        .gradcheck
        .fault_relu_scale
        .map(AdjointFault::ScaleReluAdjoint);
    Ok(gradcheck_suite_with_fault(
        &unroll,
        cfg.gradcheck.draws,
        Streams::new(cfg.seed).gradcheck(),
        which,
        cfg.gradcheck.eps,
        fault,
    )?)
}
