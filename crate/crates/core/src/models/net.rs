use crate::diff::{NodeId, Tape};
use crate::envs::{EnvConfig, EnvKind, Scaling};

use super::data::Dataset;
use super::mlp::{mlp_eval, mlp_forward, MlpNodes, MlpSpec};
use super::ModelError;

/// How raw MLP outputs `z` become model outputs `y`.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputMap {
    /// `y = z ⊙ scale + center`.
    Affine { center: Vec<f64>, scale: Vec<f64> },
    /// `y = x[..n] + z ⊙ scale`: the net predicts a scaled change of the
    /// first `n` raw inputs (the state, for next-state predictors).
    Residual { scale: Vec<f64> },
}

impl OutputMap {
    pub fn scale(&self) -> &[f64] {
        match self {
            OutputMap::Affine { scale, .. } | OutputMap::Residual { scale } => scale,
        }
    }
}

/// An MLP with fixed input normalisation and output map.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub mlp: MlpSpec,
    pub input: Scaling,
    pub output: OutputMap,
}

impl NetSpec {
    pub fn new(mlp: MlpSpec, input: Scaling, output: OutputMap) -> Result<Self, ModelError> {
        mlp.validate()?;
        if input.len() != mlp.input_dim {
            return Err(ModelError::Spec(format!(
                "input scaling has {} entries, mlp takes {}",
                input.len(),
                mlp.input_dim
            )));
        }
        if output.scale().len() != mlp.output_dim {
            return Err(ModelError::Spec(format!(
                "output map has {} entries, mlp gives {}",
                output.scale().len(),
                mlp.output_dim
            )));
        }
        if let OutputMap::Affine { center, .. } = &output {
            if center.len() != mlp.output_dim {
                return Err(ModelError::Spec("output center length".into()));
            }
        }
        if matches!(output, OutputMap::Residual { .. }) && mlp.output_dim > mlp.input_dim {
            return Err(ModelError::Spec("residual output wider than input".into()));
        }
        Ok(Self { mlp, input, output })
    }

    /// `π(s)`: scaled state in, action out. The line-game policy uses raw
    /// units so that its class contains the hand-written optimum.
    pub fn policy(env: &EnvConfig, hidden: &[usize]) -> Result<Self, ModelError> {
        let (ds, da) = (env.state_dim(), env.action_dim());
        let mlp = MlpSpec::new(ds, hidden, da)?;
        if env.kind() == EnvKind::Line {
            return Self::new(
                mlp,
                Scaling::identity(ds),
                OutputMap::Affine {
                    center: vec![0.0; da],
                    scale: vec![1.0; da],
                },
            );
        }
        let act = env.action_scaling();
        Self::new(
            mlp,
            env.state_scaling(),
            OutputMap::Affine {
                center: act.center,
                scale: act.half_width,
            },
        )
    }

    /// `DNN_N(s, a) ≈ s'` in residual form.
    pub fn next_state(env: &EnvConfig, hidden: &[usize]) -> Result<Self, ModelError> {
        let (ds, da) = (env.state_dim(), env.action_dim());
        Self::new(
            MlpSpec::new(ds + da, hidden, ds)?,
            env.state_scaling().concat(&env.action_scaling()),
            OutputMap::Residual {
                scale: env.step_scaling().half_width,
            },
        )
    }

    /// `DNN_r(s, a) ≈ r`.
    pub fn reward(env: &EnvConfig, hidden: &[usize]) -> Result<Self, ModelError> {
        let (ds, da) = (env.state_dim(), env.action_dim());
        Self::new(
            MlpSpec::new(ds + da, hidden, 1)?,
            env.state_scaling().concat(&env.action_scaling()),
            OutputMap::Affine {
                center: vec![0.0],
                scale: vec![1.0],
            },
        )
    }

    /// Same net with an affine output map set to the targets' mean and
    /// standard deviation.
    pub fn standardized_for(mut self, data: &Dataset) -> Result<Self, ModelError> {
        let (center, scale) = (data.target_mean(), data.target_std());
        if center.len() != self.output_dim() {
            return Err(ModelError::Dimension(
                "target width differs from net output".into(),
            ));
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ModelError::Data("targets have zero spread".into()));
        }
        self.output = OutputMap::Affine { center, scale };
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &MlpNodes,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        let got = tape.value(x).len();
        if got != self.input_dim() {
            return Err(ModelError::Dimension(format!(
                "input has {got} entries, net expects {}",
                self.input_dim()
            )));
        }
        let c = tape.leaf_blocked(&self.input.center);
        let hw = tape.leaf_blocked(&self.input.half_width);
        let xs = tape.sub(x, c)?;
        let xs = tape.div(xs, hw)?;
        let z = mlp_forward(tape, nodes, &self.mlp, xs)?;
        let scale = tape.leaf_blocked(self.output.scale());
        let y = tape.mul(z, scale)?;
        Ok(match &self.output {
            OutputMap::Affine { center, .. } => {
                let c = tape.leaf_blocked(center);
                tape.add(y, c)?
            }
            OutputMap::Residual { .. } => {
                let base = tape.select(x, 0, self.output_dim())?;
                tape.add(base, y)?
            }
        })
    }

    pub fn normalize_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input.center)
            .zip(&self.input.half_width)
            .map(|((v, c), h)| (v - c) / h)
            .collect()
    }

    /// Maps raw MLP output to model output; the numeric twin of the tail of
    /// [`NetSpec::forward`].
    pub fn map_output(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        match &self.output {
            OutputMap::Affine { center, scale } => z
                .iter()
                .zip(scale)
                .zip(center)
                .map(|((z, s), c)| z * s + c)
                .collect(),
            OutputMap::Residual { scale } => z
                .iter()
                .zip(scale)
                .zip(x)
                .map(|((z, s), b)| b + z * s)
                .collect(),
        }
    }

    /// Target for the raw MLP output such that `map_output` hits `y`.
    pub fn raw_target(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match &self.output {
            OutputMap::Affine { center, scale } => y
                .iter()
                .zip(scale)
                .zip(center)
                .map(|((y, s), c)| (y - c) / s)
                .collect(),
            OutputMap::Residual { scale } => y
                .iter()
                .zip(scale)
                .zip(x)
                .map(|((y, s), b)| (y - b) / s)
                .collect(),
        }
    }

    /// Numeric evaluation, bitwise equal to [`NetSpec::forward`].
    pub fn eval(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "net input dimension");
        let z = mlp_eval(&self.mlp, theta, &self.normalize_input(x));
        self.map_output(x, &z)
    }
}

fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    [s, a].concat()
}

pub fn predict_next(
    net: &NetSpec,
    theta: &[f64],
    s: &[f64],
    a: &[f64],
) -> Result<Vec<f64>, ModelError> {
    check_sa(net, s, a)?;
    Ok(net.eval(theta, &concat(s, a)))
}

pub fn predict_reward(
    net: &NetSpec,
    theta: &[f64],
    s: &[f64],
    a: &[f64],
) -> Result<f64, ModelError> {
    check_sa(net, s, a)?;
    Ok(net.eval(theta, &concat(s, a))[0])
}

fn check_sa(net: &NetSpec, s: &[f64], a: &[f64]) -> Result<(), ModelError> {
    if s.len() + a.len() != net.input_dim() {
        return Err(ModelError::Dimension(format!(
            "(s, a) has {} entries, net expects {}",
            s.len() + a.len(),
            net.input_dim()
        )));
    }
    Ok(())
}
