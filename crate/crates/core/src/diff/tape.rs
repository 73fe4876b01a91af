//! Append-only reverse-mode tape over dense `f64` vectors.
//!
//! Values are computed eagerly when a node is appended, so callers can read
//! a node's value in the middle of construction (the unroller needs the
//! predicted next state before it asks the simulator for the residual).
//! Inputs always refer to earlier nodes; the node order is a topological
//! order and [`Tape::backward`] is a single reverse sweep.

use smallvec::SmallVec;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations. Elementwise binary ops require equal lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// `W x + b` with `W` stored row-major; inputs `[w, b, x]`.
    Affine {
        rows: usize,
        cols: usize,
    },
    Relu,
    /// `[x]_+`; the same map as [`Op::Relu`].
    PosPart,
    Abs,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Offset(f64),
    /// Elementwise `max(x, c)`.
    MaxConst(f64),
    Clamp {
        lo: f64,
        hi: f64,
    },
    Sum,
    /// `‖x − y‖²`.
    SqDiff,
    Select {
        start: usize,
        len: usize,
    },
    Concat,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Affine { .. } => "affine",
            Op::Relu => "relu",
            Op::PosPart => "pospart",
            Op::Abs => "abs",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::MaxConst(_) => "max_const",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::SqDiff => "sq_diff",
            Op::Select { .. } => "select",
            Op::Concat => "concat",
        }
    }

    /// Distance of `x` from the nearest non-differentiable point of this op,
    /// or `None` for smooth ops.
    fn kink_distance(&self, x: f64) -> Option<f64> {
        match *self {
            Op::Relu | Op::PosPart | Op::Abs => Some(x.abs()),
            Op::MaxConst(c) => Some((x - c).abs()),
            Op::Clamp { lo, hi } => Some((x - lo).abs().min((x - hi).abs())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Differentiable leaf; reported by [`Tape::backward`].
    Param,
    /// Constant leaf. Nothing is ever accumulated into it.
    Blocked,
    Computed,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: dimension mismatch ({detail})")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be scalar, got length {0}")]
    NonScalarRoot(usize),
}

/// Test hook that corrupts one adjoint rule so gradient checks can be shown
/// to fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjointFault {
    ScaleReluAdjoint(f64),
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    op: Option<Op>,
    inputs: SmallVec<[NodeId; 3]>,
    value: Vec<f64>,
    adjoint: Vec<f64>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// `(first node index, label)` for each segment opened with
    /// [`Tape::begin_segment`].
    segments: Vec<(usize, usize)>,
    fault: Option<AdjointFault>,
}

/// Parameter gradients keyed by leaf, in leaf creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: Vec<(NodeId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| *n == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f64])> {
        self.entries.iter().map(|(n, g)| (*n, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<AdjointFault>) {
        self.fault = fault;
    }

    pub fn leaf_param(&mut self, init: &[f64]) -> NodeId {
        self.push(NodeKind::Param, None, SmallVec::new(), init.to_vec(), true)
    }

    pub fn leaf_blocked(&mut self, value: &[f64]) -> NodeId {
        self.push(
            NodeKind::Blocked,
            None,
            SmallVec::new(),
            value.to_vec(),
            false,
        )
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.leaf_blocked(&[value])
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn adjoint(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].adjoint
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.nodes[id.0].kind
    }

    pub fn op(&self, id: NodeId) -> Option<Op> {
        self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Whether any parameter leaf reaches `id`.
    pub fn depends_on_params(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Nodes appended from now on belong to segment `label` (a step index).
    pub fn begin_segment(&mut self, label: usize) {
        self.segments.push((self.nodes.len(), label));
    }

    pub fn segment_of(&self, id: NodeId) -> Option<usize> {
        self.segments
            .iter()
            .rev()
            .find(|(start, _)| *start <= id.0)
            .map(|&(_, label)| label)
    }

    /// Smallest distance between any kink-op input and its kink, over nodes
    /// that depend on parameters. `f64::INFINITY` when there are none.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let Some(op) = node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let input = &self.nodes[node.inputs[0].0].value;
            for &x in input {
                if let Some(d) = op.kink_distance(x) {
                    margin = margin.min(d);
                }
            }
        }
        margin
    }

    /// First node (in construction order) whose adjoint is not finite.
    pub fn first_non_finite_adjoint(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.needs_grad && n.adjoint.iter().any(|v| !v.is_finite()))
            .map(NodeId)
    }

    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, TapeError> {
        let value = self.forward(op, inputs)?;
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push(
            NodeKind::Computed,
            Some(op),
            SmallVec::from_slice(inputs),
            value,
            needs_grad,
        ))
    }

    fn push(
        &mut self,
        kind: NodeKind,
        op: Option<Op>,
        inputs: SmallVec<[NodeId; 3]>,
        value: Vec<f64>,
        needs_grad: bool,
    ) -> NodeId {
        let adjoint = vec![0.0; value.len()];
        self.nodes.push(Node {
            kind,
            op,
            inputs,
            value,
            adjoint,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn forward(&self, op: Op, inputs: &[NodeId]) -> Result<Vec<f64>, TapeError> {
        let name = op.name();
        let arity = |n: usize| -> Result<(), TapeError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TapeError::Arity {
                    op: name,
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        let v = |i: usize| self.nodes[inputs[i].0].value.as_slice();
        let same_len = |a: &[f64], b: &[f64]| -> Result<(), TapeError> {
            if a.len() == b.len() {
                Ok(())
            } else {
                Err(TapeError::Dimension {
                    op: name,
                    detail: format!("{} vs {}", a.len(), b.len()),
                })
            }
        };
        let map = |f: &dyn Fn(f64) -> f64| -> Result<Vec<f64>, TapeError> {
            arity(1)?;
            Ok(v(0).iter().map(|&x| f(x)).collect())
        };
        let zip = |f: &dyn Fn(f64, f64) -> f64| -> Result<Vec<f64>, TapeError> {
            arity(2)?;
            same_len(v(0), v(1))?;
            Ok(v(0).iter().zip(v(1)).map(|(&a, &b)| f(a, b)).collect())
        };
        match op {
            Op::Affine { rows, cols } => {
                arity(3)?;
                let (w, b, x) = (v(0), v(1), v(2));
                if w.len() != rows * cols || b.len() != rows || x.len() != cols {
                    return Err(TapeError::Dimension {
                        op: name,
                        detail: format!(
                            "W {} (want {rows}x{cols}), b {} (want {rows}), x {} (want {cols})",
                            w.len(),
                            b.len(),
                            x.len()
                        ),
                    });
                }
                let mut out = vec![0.0; rows];
                affine_into(w, b, x, &mut out);
                Ok(out)
            }
            Op::Relu | Op::PosPart => map(&|x| relu(x)),
            Op::Abs => map(&|x| x.abs()),
            Op::Add => zip(&|a, b| a + b),
            Op::Sub => zip(&|a, b| a - b),
            Op::Mul => zip(&|a, b| a * b),
            Op::Div => zip(&|a, b| a / b),
            Op::Scale(c) => map(&|x| c * x),
            Op::Offset(c) => map(&|x| x + c),
            Op::MaxConst(c) => map(&|x| x.max(c)),
            Op::Clamp { lo, hi } => map(&|x| x.clamp(lo, hi)),
            Op::Sum => {
                arity(1)?;
                Ok(vec![v(0).iter().sum()])
            }
            Op::SqDiff => {
                arity(2)?;
                same_len(v(0), v(1))?;
                Ok(vec![v(0)
                    .iter()
                    .zip(v(1))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()])
            }
            Op::Select { start, len } => {
                arity(1)?;
                let x = v(0);
                if start + len > x.len() {
                    return Err(TapeError::Dimension {
                        op: name,
                        detail: format!("range {start}..{} of length {}", start + len, x.len()),
                    });
                }
                Ok(x[start..start + len].to_vec())
            }
            Op::Concat => {
                if inputs.is_empty() {
                    return Err(TapeError::Arity {
                        op: name,
                        expected: 1,
                        got: 0,
                    });
                }
                Ok(inputs
                    .iter()
                    .flat_map(|i| self.nodes[i.0].value.iter().copied())
                    .collect())
            }
        }
    }

    /// Reverse sweep from a scalar `root`. Returns the adjoint of every
    /// parameter leaf; blocked leaves never receive anything.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients, TapeError> {
        let n = self.nodes[root.0].value.len();
        if n != 1 {
            return Err(TapeError::NonScalarRoot(n));
        }
        for node in &mut self.nodes {
            node.adjoint.iter_mut().for_each(|a| *a = 0.0);
        }
        self.nodes[root.0].adjoint[0] = 1.0;

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].op.is_none() {
                continue;
            }
            // Split so the node can be read while its inputs are written.
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if node.adjoint.iter().all(|&a| a == 0.0) {
                continue;
            }
            propagate(node, before, self.fault);
        }

        let entries = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter(|(_, n)| n.kind == NodeKind::Param)
            .map(|(i, n)| (NodeId(i), n.adjoint.clone()))
            .collect();
        Ok(Gradients { entries })
    }

    // Convenience wrappers.

    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId, TapeError> {
        let rows = self.nodes[b.0].value.len();
        let cols = self.nodes[x.0].value.len();
        self.apply(Op::Affine { rows, cols }, &[w, b, x])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::Relu, &[x])
    }
    pub fn pospart(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::PosPart, &[x])
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::Abs, &[x])
    }
    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::Add, &[x, y])
    }
    pub fn sub(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::Sub, &[x, y])
    }
    pub fn mul(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::Mul, &[x, y])
    }
    pub fn div(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::Div, &[x, y])
    }
    pub fn scale(&mut self, c: f64, x: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::Scale(c), &[x])
    }
    pub fn offset(&mut self, x: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.apply(Op::Offset(c), &[x])
    }
    pub fn max_const(&mut self, x: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.apply(Op::MaxConst(c), &[x])
    }
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, TapeError> {
        self.apply(Op::Clamp { lo, hi }, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::Sum, &[x])
    }
    pub fn sq_diff(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, TapeError> {
        self.apply(Op::SqDiff, &[x, y])
    }
    pub fn select(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        self.apply(Op::Select { start, len }, &[x])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        self.apply(Op::Concat, parts)
    }
}

impl fmt::Display for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            let label = match (n.kind, n.op) {
                (NodeKind::Param, _) => "param".to_string(),
                (NodeKind::Blocked, _) => "blocked".to_string(),
                (_, Some(op)) => op.name().to_string(),
                _ => "?".to_string(),
            };
            let ins: Vec<String> = n.inputs.iter().map(|i| i.0.to_string()).collect();
            writeln!(
                f,
                "%{i} = {label}({}) len={}",
                ins.join(", "),
                n.value.len()
            )?;
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `out = W x + b`, `W` row-major. Shared with the numeric MLP path so that
/// tape and plain evaluation agree bit for bit.
pub fn affine_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (wij, xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        *o = acc + b[i];
    }
}

fn propagate(node: &Node, before: &mut [Node], fault: Option<AdjointFault>) {
    let op = node.op.expect("computed node");
    let adj = &node.adjoint;
    let ins = &node.inputs;

    // Accumulate `f(i)` into input `k` unless it is a constant.
    fn acc(before: &mut [Node], id: NodeId, f: impl Fn(usize, f64) -> f64) {
        let target = &mut before[id.0];
        if !target.needs_grad {
            return;
        }
        let vals: Vec<f64> = (0..target.adjoint.len())
            .map(|i| f(i, target.value[i]))
            .collect();
        for (a, v) in target.adjoint.iter_mut().zip(vals) {
            *a += v;
        }
    }

    match op {
        Op::Affine { rows, cols } => {
            let (w_id, b_id, x_id) = (ins[0], ins[1], ins[2]);
            let x = before[x_id.0].value.clone();
            if before[w_id.0].needs_grad {
                let gw = &mut before[w_id.0].adjoint;
                for i in 0..rows {
                    let ai = adj[i];
                    if ai == 0.0 {
                        continue;
                    }
                    for j in 0..cols {
                        gw[i * cols + j] += ai * x[j];
                    }
                }
            }
            if before[b_id.0].needs_grad {
                for (g, a) in before[b_id.0].adjoint.iter_mut().zip(adj) {
                    *g += a;
                }
            }
            if before[x_id.0].needs_grad {
                let mut gx = vec![0.0; cols];
                {
                    let w = &before[w_id.0].value;
                    for i in 0..rows {
                        let ai = adj[i];
                        if ai == 0.0 {
                            continue;
                        }
                        for j in 0..cols {
                            gx[j] += w[i * cols + j] * ai;
                        }
                    }
                }
                for (g, v) in before[x_id.0].adjoint.iter_mut().zip(gx) {
                    *g += v;
                }
            }
        }
        Op::Relu | Op::PosPart => {
            let k = match (op, fault) {
                (Op::Relu, Some(AdjointFault::ScaleReluAdjoint(k))) => k,
                _ => 1.0,
            };
            acc(before, ins[0], |i, x| k * adj[i] * step(x));
        }
        Op::Abs => acc(before, ins[0], |i, x| adj[i] * sign(x)),
        Op::Add => {
            acc(before, ins[0], |i, _| adj[i]);
            acc(before, ins[1], |i, _| adj[i]);
        }
        Op::Sub => {
            acc(before, ins[0], |i, _| adj[i]);
            acc(before, ins[1], |i, _| -adj[i]);
        }
        Op::Mul => {
            let y = before[ins[1].0].value.clone();
            let x = before[ins[0].0].value.clone();
            acc(before, ins[0], |i, _| adj[i] * y[i]);
            acc(before, ins[1], |i, _| adj[i] * x[i]);
        }
        Op::Div => {
            let y = before[ins[1].0].value.clone();
            let x = before[ins[0].0].value.clone();
            acc(before, ins[0], |i, _| adj[i] / y[i]);
            acc(before, ins[1], |i, _| -adj[i] * x[i] / (y[i] * y[i]));
        }
        Op::Scale(c) => acc(before, ins[0], |i, _| c * adj[i]),
        Op::Offset(_) => acc(before, ins[0], |i, _| adj[i]),
        Op::MaxConst(c) => acc(before, ins[0], |i, x| if x > c { adj[i] } else { 0.0 }),
        Op::Clamp { lo, hi } => acc(
            before,
            ins[0],
            |i, x| {
                if x > lo && x < hi {
                    adj[i]
                } else {
                    0.0
                }
            },
        ),
        Op::Sum => acc(before, ins[0], |_, _| adj[0]),
        Op::SqDiff => {
            let x = before[ins[0].0].value.clone();
            let y = before[ins[1].0].value.clone();
            acc(before, ins[0], |i, _| 2.0 * (x[i] - y[i]) * adj[0]);
            acc(before, ins[1], |i, _| -2.0 * (x[i] - y[i]) * adj[0]);
        }
        Op::Select { start, len } => acc(before, ins[0], |i, _| {
            if i >= start && i < start + len {
                adj[i - start]
            } else {
                0.0
            }
        }),
        Op::Concat => {
            let mut offset = 0;
            for &id in ins.iter() {
                let len = before[id.0].value.len();
                let o = offset;
                acc(before, id, |i, _| adj[o + i]);
                offset += len;
            }
        }
    }
}
