//! Flat `key = value` experiment configs.
//!
//! Every key is declared once in [`ExperimentConfig::visit`]; the same walk
//! reads a config and writes the manifest, so the two cannot drift apart.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use predplan::envs::{AccConfig, EnvConfig, EnvKind, LineConfig, RoundaboutConfig};
use predplan::models::{Exploration, FitConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Experiment {
    AccAnalytic,
    AccLearned,
    LineAdversarial,
    RoundaboutGivenDynamics,
    RoundaboutJoint,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::AccAnalytic,
        Experiment::AccLearned,
        Experiment::LineAdversarial,
        Experiment::RoundaboutGivenDynamics,
        Experiment::RoundaboutJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::AccAnalytic => "acc-analytic",
            Experiment::AccLearned => "acc-learned",
            Experiment::LineAdversarial => "line-adversarial",
            Experiment::RoundaboutGivenDynamics => "roundabout-given-dynamics",
            Experiment::RoundaboutJoint => "roundabout-joint",
        }
    }

    pub fn env_kind(self) -> EnvKind {
        match self {
            Experiment::AccAnalytic | Experiment::AccLearned => EnvKind::Acc,
            Experiment::LineAdversarial => EnvKind::Line,
            Experiment::RoundaboutGivenDynamics | Experiment::RoundaboutJoint => {
                EnvKind::Roundabout
            }
        }
    }

    /// Whether the experiment uses learned predictors.
    pub fn learns_models(self) -> bool {
        matches!(self, Experiment::AccLearned | Experiment::RoundaboutJoint)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
                format!(
                    "unknown experiment {s:?} (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub episodes: usize,
    pub lr: f64,
    pub model_lr: f64,
    pub momentum: f64,
    pub clip: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub lambda_next: f64,
    pub lambda_reward: f64,
    /// Report the curve's best checkpoint instead of the last iterate.
    pub keep_best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSection {
    pub draws: usize,
    pub horizon: usize,
    pub eps: f64,
    /// Test fixture: multiplies the relu adjoint by this factor.
    pub fault_relu_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub env: EnvConfig,
    pub policy_hidden: Vec<usize>,
    /// Hidden layers of learned predictors.
    pub model_hidden: Vec<usize>,
    pub train: TrainSection,
    /// Behaviour noise for data collection, and for training episodes in
    /// joint training.
    pub explore: Exploration,
    pub fit: FitConfig,
    pub fit_samples: usize,
    pub eval_episodes: usize,
    pub trajectories: usize,
    pub gradcheck: GradcheckSection,
}

impl ExperimentConfig {
    /// Tuned defaults for an experiment.
    pub fn defaults(experiment: Experiment, seed: u64) -> Self {
        let env = match experiment.env_kind() {
            EnvKind::Acc => EnvConfig::Acc(AccConfig::default()),
            EnvKind::Line => EnvConfig::Line(LineConfig::default()),
            EnvKind::Roundabout => EnvConfig::Roundabout(RoundaboutConfig::default()),
        };
        let mut train = TrainSection {
            episodes: 2000,
            lr: 1e-3,
            model_lr: 1e-3,
            momentum: 0.9,
            clip: 1.0,
            eval_every: 100,
            eval_episodes: 20,
            lambda_next: 0.0,
            lambda_reward: 0.0,
            keep_best: false,
        };
        let (policy_hidden, eval_episodes) = match experiment.env_kind() {
            EnvKind::Acc => (vec![32, 32], 100),
            EnvKind::Line => (vec![2], 1000),
            EnvKind::Roundabout => (vec![64, 64], 200),
        };
        match experiment {
            Experiment::AccAnalytic | Experiment::AccLearned => train.lr = 3e-3,
            Experiment::LineAdversarial => {
                train.lr = 1e-2;
                train.episodes = 1000;
                train.keep_best = true;
                train.eval_episodes = 50;
            }
            Experiment::RoundaboutGivenDynamics => train.lr = 3e-4,
            Experiment::RoundaboutJoint => {
                train.lr = 3e-4;
                train.model_lr = 3e-3;
                train.lambda_next = 1.0;
            }
        }
        Self {
            experiment,
            seed,
            out: None,
            env,
            policy_hidden,
            model_hidden: vec![64, 64],
            train,
            explore: Exploration::default(),
            fit: FitConfig {
                lr: 1e-2,
                epochs: 60,
                anneal: 0.5,
                ..FitConfig::default()
            },
            fit_samples: 50_000,
            eval_episodes,
            trajectories: 10,
            gradcheck: GradcheckSection {
                draws: 20,
                horizon: 10,
                eps: 1e-6,
                fault_relu_scale: None,
            },
        }
    }

    /// Parses config text. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::Parse {
                origin: origin.to_string(),
                line,
                msg,
            };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
            {
                return Err(err(format!("bad key {key:?}")));
            }
            if value.is_empty() {
                return Err(err(format!("no value for {key}")));
            }
            if let Some((first, _)) = entries.insert(key.to_string(), (line, value.to_string())) {
                return Err(err(format!("{key} already set on line {first}")));
            }
        }
        let missing = |key: &str| CliError::Parse {
            origin: origin.to_string(),
            line: 0,
            msg: format!("missing required key `{key}`"),
        };
        let experiment: Experiment = {
            let (line, v) = entries
                .remove("experiment")
                .ok_or_else(|| missing("experiment"))?;
            v.parse().map_err(|msg| CliError::Parse {
                origin: origin.to_string(),
                line,
                msg,
            })?
        };
        if !entries.contains_key("seed") {
            return Err(missing("seed"));
        }
        let mut cfg = Self::defaults(experiment, 0);
        let mut reader = Reader {
            entries,
            origin,
            error: None,
        };
        cfg.visit(&mut reader);
        if let Some(e) = reader.error {
            return Err(e);
        }
        if let Some((key, (line, _))) = reader.entries.iter().min_by_key(|(_, (line, _))| *line) {
            return Err(CliError::Parse {
                origin: origin.to_string(),
                line: *line,
                msg: format!("unknown key `{key}` for experiment {experiment}"),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// The resolved config as `key = value` text. The output directory is
    /// left out so that a manifest does not depend on where it was written.
    pub fn manifest(&self) -> String {
        let mut cfg = self.clone();
        let mut writer = Writer {
            out: format!("experiment = {}\n", self.experiment),
        };
        cfg.visit(&mut writer);
        writer.out
    }

    /// Range checks run before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let t = &self.train;
        let mut bad = Vec::new();
        let mut check = |ok: bool, what: &str| {
            if !ok {
                bad.push(what.to_string());
            }
        };
        check(
            t.lr >= 0.0 && t.lr.is_finite(),
            "train.lr must be finite and >= 0",
        );
        check(
            t.model_lr >= 0.0 && t.model_lr.is_finite(),
            "train.model_lr must be finite and >= 0",
        );
        check(
            (0.0..1.0).contains(&t.momentum),
            "train.momentum must be in [0, 1)",
        );
        check(t.clip >= 0.0, "train.clip must be >= 0");
        check(t.eval_every > 0, "train.eval_every must be positive");
        check(t.eval_episodes > 0, "train.eval_episodes must be positive");
        check(
            t.lambda_next >= 0.0 && t.lambda_reward >= 0.0,
            "train.lambda_* must be >= 0",
        );
        check(
            !self.policy_hidden.is_empty() && !self.policy_hidden.contains(&0),
            "policy.hidden needs positive widths",
        );
        check(
            !self.model_hidden.is_empty() && !self.model_hidden.contains(&0),
            "model.hidden needs positive widths",
        );
        check(
            (0.0..=1.0).contains(&self.explore.epsilon),
            "explore.epsilon must be in [0, 1]",
        );
        check(self.explore.sigma >= 0.0, "explore.sigma must be >= 0");
        check(
            self.fit.lr >= 0.0 && self.fit.batch > 0,
            "fit.lr must be >= 0 and fit.batch positive",
        );
        check(
            (0.0..1.0).contains(&self.fit.holdout),
            "fit.holdout must be in [0, 1)",
        );
        check(
            (0.0..=1.0).contains(&self.fit.anneal),
            "fit.anneal must be in [0, 1]",
        );
        check(self.fit_samples > 0, "fit.samples must be positive");
        check(self.eval_episodes > 0, "eval.episodes must be positive");
        check(
            self.gradcheck.draws > 0 && self.gradcheck.eps > 0.0,
            "gradcheck.draws and gradcheck.eps must be positive",
        );
        check(
            (1..=20).contains(&self.gradcheck.horizon),
            "gradcheck.horizon must be in 1..=20",
        );
        check(self.env.horizon() > 0, "env.horizon must be positive");
        match &self.env {
            EnvConfig::Acc(c) => {
                check(c.tau > 0.0, "env.tau must be positive");
                check(
                    c.action_box.0 < c.action_box.1,
                    "env.action_box must be increasing",
                );
            }
            EnvConfig::Line(c) => {
                check(c.nu_bound >= 0.0, "env.nu_bound must be >= 0");
                check(
                    c.action_box.0 < c.action_box.1,
                    "env.action_box must be increasing",
                );
            }
            EnvConfig::Roundabout(c) => {
                check(
                    c.tau > 0.0 && c.a_max > 0.0,
                    "env.tau and env.a_max must be positive",
                );
                check(c.n_targets > 0, "env.n_targets must be positive");
                check(
                    (0.0..=1.0).contains(&c.p_aggressive),
                    "env.p_aggressive must be in [0, 1]",
                );
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad.join("; ")))
        }
    }

    fn visit(&mut self, v: &mut dyn Visitor) {
        v.field("seed", &mut self.seed);
        v.field("out", &mut self.out);
        match &mut self.env {
            EnvConfig::Acc(c) => {
                v.field("env.horizon", &mut c.horizon);
                v.field("env.tau", &mut c.tau);
                v.field("env.a_max_target", &mut c.a_max_target);
                v.field("env.target_jerk", &mut c.target_jerk);
                v.field("env.v_target_range", &mut c.v_target_range);
                v.field("env.v_host_range", &mut c.v_host_range);
                v.field("env.gap_range", &mut c.gap_range);
                v.field("env.action_box", &mut c.action_box);
            }
            EnvConfig::Line(c) => {
                v.field("env.horizon", &mut c.horizon);
                v.field("env.nu_bound", &mut c.nu_bound);
                v.field("env.init_range", &mut c.init_range);
                v.field("env.action_box", &mut c.action_box);
            }
            EnvConfig::Roundabout(c) => {
                v.field("env.horizon", &mut c.horizon);
                v.field("env.n_targets", &mut c.n_targets);
                v.field("env.p_aggressive", &mut c.p_aggressive);
                v.field("env.tau", &mut c.tau);
                v.field("env.a_max", &mut c.a_max);
                v.field("env.exit_distance", &mut c.exit_distance);
                v.field("env.conflict_radius", &mut c.conflict_radius);
                v.field("env.headway", &mut c.headway);
                v.field("env.host_start", &mut c.host_start);
                v.field("env.host_speed", &mut c.host_speed);
                v.field("env.target_span", &mut c.target_span);
                v.field("env.target_speed", &mut c.target_speed);
                v.field("env.min_spacing", &mut c.min_spacing);
                v.field("env.placement_tries", &mut c.placement_tries);
                v.field("env.tracking_gain", &mut c.tracking_gain);
                v.field("env.host_window", &mut c.host_window);
                v.field("env.target_window", &mut c.target_window);
                v.field("env.smoothness_weight", &mut c.smoothness_weight);
                v.field("env.time_cost", &mut c.time_cost);
                v.field("env.violation_penalty", &mut c.violation_penalty);
                v.field("env.exit_bonus", &mut c.exit_bonus);
                v.field("env.distance_weight", &mut c.distance_weight);
                v.field("env.caution_radius", &mut c.caution_radius);
                v.field("env.gap_margin", &mut c.gap_margin);
                v.field("env.merge_ramp", &mut c.merge_ramp);
                v.field("env.safety_weight", &mut c.safety_weight);
            }
        }
        v.field("policy.hidden", &mut self.policy_hidden);
        let t = &mut self.train;
        v.field("train.episodes", &mut t.episodes);
        v.field("train.lr", &mut t.lr);
        v.field("train.momentum", &mut t.momentum);
        v.field("train.clip", &mut t.clip);
        v.field("train.eval_every", &mut t.eval_every);
        v.field("train.eval_episodes", &mut t.eval_episodes);
        v.field("train.keep_best", &mut t.keep_best);
        if self.experiment.learns_models() {
            v.field("model.hidden", &mut self.model_hidden);
            v.field("explore.epsilon", &mut self.explore.epsilon);
            v.field("explore.sigma", &mut self.explore.sigma);
        }
        if self.experiment == Experiment::RoundaboutJoint {
            v.field("train.model_lr", &mut t.model_lr);
            v.field("train.lambda_next", &mut t.lambda_next);
        }
        if self.experiment == Experiment::AccLearned {
            v.field("fit.samples", &mut self.fit_samples);
            v.field("fit.lr", &mut self.fit.lr);
            v.field("fit.momentum", &mut self.fit.momentum);
            v.field("fit.batch", &mut self.fit.batch);
            v.field("fit.epochs", &mut self.fit.epochs);
            v.field("fit.holdout", &mut self.fit.holdout);
            v.field("fit.anneal", &mut self.fit.anneal);
        }
        v.field("eval.episodes", &mut self.eval_episodes);
        v.field("eval.trajectories", &mut self.trajectories);
        let g = &mut self.gradcheck;
        v.field("gradcheck.draws", &mut g.draws);
        v.field("gradcheck.horizon", &mut g.horizon);
        v.field("gradcheck.eps", &mut g.eps);
        v.hidden("gradcheck.fault_relu_scale", &mut g.fault_relu_scale);
    }
}

/// A config value that can be read from and written to text.
trait Value {
    fn read(&mut self, s: &str) -> Result<(), String>;
    /// `None` leaves the key out of the manifest.
    fn show(&self) -> Option<String>;
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse().map_err(|e| format!("{s:?}: {e}"))
}

impl Value for f64 {
    fn read(&mut self, s: &str) -> Result<(), String> {
        let x: f64 = parse_num(s)?;
        if !x.is_finite() {
            return Err(format!("{s:?} is not finite"));
        }
        *self = x;
        Ok(())
    }

    fn show(&self) -> Option<String> {
        Some(format!("{self:?}"))
    }
}

impl Value for usize {
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = parse_num(s)?;
        Ok(())
    }

    fn show(&self) -> Option<String> {
        Some(self.to_string())
    }
}

impl Value for u64 {
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = parse_num(s)?;
        Ok(())
    }

    fn show(&self) -> Option<String> {
        Some(self.to_string())
    }
}

impl Value for bool {
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = parse_num(s)?;
        Ok(())
    }

    fn show(&self) -> Option<String> {
        Some(self.to_string())
    }
}

impl Value for (f64, f64) {
    fn read(&mut self, s: &str) -> Result<(), String> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("expected `lo, hi`, got {s:?}"))?;
        let (mut lo, mut hi) = (0.0, 0.0);
        lo.read(a.trim())?;
        hi.read(b.trim())?;
        if lo > hi {
            return Err(format!("range {s:?} is decreasing"));
        }
        *self = (lo, hi);
        Ok(())
    }

    fn show(&self) -> Option<String> {
        Some(format!("{:?}, {:?}", self.0, self.1))
    }
}

impl Value for Vec<usize> {
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = s
            .split(',')
            .map(|w| parse_num(w.trim()))
            .collect::<Result<_, _>>()?;
        Ok(())
    }

    fn show(&self) -> Option<String> {
        let parts: Vec<String> = self.iter().map(usize::to_string).collect();
        Some(parts.join(", "))
    }
}

impl Value for Option<PathBuf> {
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = Some(PathBuf::from(s));
        Ok(())
    }

    fn show(&self) -> Option<String> {
        None
    }
}

impl Value for Option<f64> {
    fn read(&mut self, s: &str) -> Result<(), String> {
        let mut x = 0.0;
        x.read(s)?;
        *self = Some(x);
        Ok(())
    }

    fn show(&self) -> Option<String> {
        self.map(|x| format!("{x:?}"))
    }
}

trait Visitor {
    fn field(&mut self, key: &str, value: &mut dyn Value);

    /// A key accepted on input but only echoed when set.
    fn hidden(&mut self, key: &str, value: &mut dyn Value) {
        self.field(key, value);
    }
}

struct Reader<'a> {
    entries: BTreeMap<String, (usize, String)>,
    origin: &'a str,
    error: Option<CliError>,
}

impl Visitor for Reader<'_> {
    fn field(&mut self, key: &str, value: &mut dyn Value) {
        let Some((line, text)) = self.entries.remove(key) else {
            return;
        };
        if self.error.is_some() {
            return;
        }
        if let Err(msg) = value.read(&text) {
            self.error = Some(CliError::Parse {
                origin: self.origin.to_string(),
                line,
                msg: format!("{key}: {msg}"),
            });
        }
    }
}

struct Writer {
    out: String,
}

impl Visitor for Writer {
    fn field(&mut self, key: &str, value: &mut dyn Value) {
        if let Some(text) = value.show() {
            self.out.push_str(&format!("{key} = {text}\n"));
        }
    }
}
