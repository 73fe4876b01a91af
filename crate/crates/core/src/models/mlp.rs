use rand::Rng;

use crate::diff::{affine_into, NodeId, ParamVector, Tape, TapeError};
use crate::rng::Seed;

use super::ModelError;

/// Fully connected ReLU network with an identity output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Self, ModelError> {
        let spec = Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(ModelError::Spec(format!(
                "dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Layout `layer{k}.weight` (out × in, row-major) then `layer{k}.bias`.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        self.layers()
            .iter()
            .enumerate()
            .flat_map(|(k, &(i, o))| {
                [
                    (format!("layer{k}.weight"), o, i),
                    (format!("layer{k}.bias"), o, 1),
                ]
            })
            .collect()
    }

    pub fn params(&self, values: Vec<f64>) -> ParamVector {
        ParamVector::from_shapes(self.param_shapes(), values)
    }

    /// Offsets of `(weight, bias)` for each layer within the flat vector.
    pub(crate) fn offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.layers()
            .iter()
            .map(|&(i, o)| {
                let w = at;
                at += i * o;
                let b = at;
                at += o;
                (w, b)
            })
            .collect()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn mlp_init(spec: &MlpSpec, seed: Seed) -> ParamVector {
    let mut rng = seed.rng();
    let mut values = Vec::with_capacity(spec.num_params());
    for (fan_in, fan_out) in spec.layers() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    spec.params(values)
}

/// A parameter vector placed on a tape, with one node per layer tensor.
#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub theta: NodeId,
    layers: Vec<(NodeId, NodeId)>,
}

impl MlpNodes {
    /// Adds `theta` as a single trainable leaf and slices it per layer.
    pub fn bind(tape: &mut Tape, spec: &MlpSpec, theta: &[f64]) -> Result<Self, ModelError> {
        let leaf = tape.leaf_param(theta);
        Self::slice(tape, spec, leaf)
    }

    /// Same as [`MlpNodes::bind`] but the weights are constants.
    pub fn bind_frozen(tape: &mut Tape, spec: &MlpSpec, theta: &[f64]) -> Result<Self, ModelError> {
        let leaf = tape.leaf_blocked(theta);
        Self::slice(tape, spec, leaf)
    }

    fn slice(tape: &mut Tape, spec: &MlpSpec, leaf: NodeId) -> Result<Self, ModelError> {
        let n = tape.value(leaf).len();
        if n != spec.num_params() {
            return Err(ModelError::Dimension(format!(
                "parameter vector has {n} entries, spec needs {}",
                spec.num_params()
            )));
        }
        let mut layers = Vec::new();
        for ((w_at, b_at), (i, o)) in spec.offsets().into_iter().zip(spec.layers()) {
            let w = tape.select(leaf, w_at, i * o)?;
            let b = tape.select(leaf, b_at, o)?;
            layers.push((w, b));
        }
        Ok(Self {
            theta: leaf,
            layers,
        })
    }
}

pub fn mlp_forward(
    tape: &mut Tape,
    nodes: &MlpNodes,
    spec: &MlpSpec,
    input: NodeId,
) -> Result<NodeId, ModelError> {
    let got = tape.value(input).len();
    if got != spec.input_dim {
        return Err(ModelError::Dimension(format!(
            "input has {got} entries, spec expects {}",
            spec.input_dim
        )));
    }
    let last = nodes.layers.len() - 1;
    let mut h = input;
    for (k, &(w, b)) in nodes.layers.iter().enumerate() {
        h = tape.affine(w, b, h)?;
        if k < last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Plain evaluation, bitwise equal to [`mlp_forward`].
pub fn mlp_eval(spec: &MlpSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), spec.input_dim, "mlp input dimension");
    let layers = spec.layers();
    let mut h = x.to_vec();
    for (k, ((w_at, b_at), (i, o))) in spec
        .offsets()
        .into_iter()
        .zip(layers.iter().copied())
        .enumerate()
    {
        let mut out = vec![0.0; o];
        affine_into(
            &theta[w_at..w_at + i * o],
            &theta[b_at..b_at + o],
            &h,
            &mut out,
        );
        if k + 1 < layers.len() {
            out.iter_mut()
                .for_each(|v| *v = crate::diff::relu_value(*v));
        }
        h = out;
    }
    h
}

/// Per-sample forward pass keeping activations, for hand-written backprop.
pub(crate) struct Activations {
    /// `acts[0]` is the input; `acts[k+1]` is the output of layer `k`
    /// (post-ReLU for hidden layers).
    acts: Vec<Vec<f64>>,
}

pub(crate) fn forward_cached(spec: &MlpSpec, theta: &[f64], x: &[f64]) -> Activations {
    let layers = spec.layers();
    let mut acts = vec![x.to_vec()];
    for (k, ((w_at, b_at), (i, o))) in spec
        .offsets()
        .into_iter()
        .zip(layers.iter().copied())
        .enumerate()
    {
        let mut out = vec![0.0; o];
        affine_into(
            &theta[w_at..w_at + i * o],
            &theta[b_at..b_at + o],
            &acts[k],
            &mut out,
        );
        if k + 1 < layers.len() {
            out.iter_mut()
                .for_each(|v| *v = crate::diff::relu_value(*v));
        }
        acts.push(out);
    }
    Activations { acts }
}

impl Activations {
    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }

    /// Accumulates `d(loss)/dθ` into `grad` given `d(loss)/d(output)`.
    pub(crate) fn backward(&self, spec: &MlpSpec, theta: &[f64], d_out: &[f64], grad: &mut [f64]) {
        let layers = spec.layers();
        let offsets = spec.offsets();
        let mut delta = d_out.to_vec();
        for k in (0..layers.len()).rev() {
            let (i, o) = layers[k];
            let (w_at, b_at) = offsets[k];
            let input = &self.acts[k];
            for r in 0..o {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                grad[b_at + r] += d;
                let row = &mut grad[w_at + r * i..w_at + (r + 1) * i];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; i];
            for r in 0..o {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &theta[w_at + r * i..w_at + (r + 1) * i];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU mask: the stored activation is positive exactly where the
            // pre-activation was.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

impl From<TapeError> for ModelError {
    fn from(e: TapeError) -> Self {
        ModelError::Tape(e)
    }
}
