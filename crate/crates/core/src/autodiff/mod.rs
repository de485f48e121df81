//! Reverse-mode differentiation. A [`Tape`] records every operation applied
//! to its variables in topological order; [`Tape::backward`] walks it once in
//! reverse, accumulating gradients into each input.

mod gradcheck;

use std::cell::Cell;
use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::Serialize;

pub use gradcheck::{finite_diff_check, random_projection, rel_error, GradCheckOptions, GradReport, ParamGradReport};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    bce_backward, conv2d_backward, dynamic_filter_backward, l2_normalize_backward,
    layer_norm_backward, masked_max, softmax_backward, sum_to_shape, upsample2x_backward, Mask,
    Scalar, Tensor, EPS,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Matmul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Softmax,
    L2Normalize,
    LayerNorm,
    Conv2d,
    DynamicFilter,
    Upsample2x,
    Sum,
    Mean,
    SumAll,
    Relu,
    Sigmoid,
    Embedding,
    MaskedMax,
    BceWithLogits,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Softmax,
        OpKind::L2Normalize,
        OpKind::LayerNorm,
        OpKind::Conv2d,
        OpKind::DynamicFilter,
        OpKind::Upsample2x,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAll,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Embedding,
        OpKind::MaskedMax,
        OpKind::BceWithLogits,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Debug hook: while the returned guard lives, backward rules of `op` on
/// this thread emit negated gradients.
pub fn inject_fault(op: OpKind) -> FaultGuard {
    let previous = FAULT.with(|f| f.replace(Some(op)));
    FaultGuard { previous }
}

pub struct FaultGuard {
    previous: Option<OpKind>,
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        FAULT.with(|f| f.set(self.previous));
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Softmax { input: Var, axis: usize },
    L2Normalize { input: Var, norms: Vec<T> },
    LayerNorm { input: Var, inv_std: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    DynamicFilter { x: Var, kernels: Var, dilation: usize },
    Upsample2x(Var),
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    Relu(Var),
    Sigmoid(Var),
    Embedding { table: Var, ids: Vec<usize> },
    MaskedMax { input: Var, argmax: Vec<usize> },
    BceWithLogits { logits: Var, target: Tensor<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::DynamicFilter { .. } => OpKind::DynamicFilter,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumAll(_) => OpKind::SumAll,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::MaskedMax { .. } => OpKind::MaskedMax,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Upsample2x(a)
            | Op::SumAll(a)
            | Op::Relu(a)
            | Op::Sigmoid(a) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { input, .. }
            | Op::Softmax { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::LayerNorm { input, .. }
            | Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::MaskedMax { input, .. } => vec![*input],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::DynamicFilter { x, kernels, .. } => vec![*x, *kernels],
            Op::Embedding { table, .. } => vec![*table],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order of the graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Kinds of the recorded ops that propagate gradients.
    pub fn op_kinds(&self) -> BTreeSet<OpKind> {
        self.nodes
            .iter()
            .filter(|n| n.needs_grad && !matches!(n.op, Op::Leaf))
            .map(|n| n.op.kind())
            .collect()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let v = self.value(a).scale(f);
        self.push(v, Op::Scale(a, f))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2d()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&refs, axis)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice(axis, start, len)?;
        Ok(self.push(v, Op::Slice { input: a, axis, start }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        let v = self.value(a).softmax(axis, mask)?;
        Ok(self.push(v, Op::Softmax { input: a, axis }))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let (v, norms) = self.value(a).l2_normalize_with_norms();
        self.push(v, Op::L2Normalize { input: a, norms })
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (v, inv_std) = self.value(a).layer_norm_with_stats();
        self.push(v, Op::LayerNorm { input: a, inv_std })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = self
            .value(x)
            .conv2d(self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn dynamic_filter(&mut self, x: Var, kernels: Var, dilation: usize) -> Result<Var> {
        let v = self.value(x).dynamic_filter(self.value(kernels), dilation)?;
        Ok(self.push(v, Op::DynamicFilter { x, kernels, dilation }))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).upsample2x()?;
        Ok(self.push(v, Op::Upsample2x(a)))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).sum_axis(axis)?;
        Ok(self.push(v, Op::Sum { input: a, axis }))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).mean_axis(axis)?;
        Ok(self.push(v, Op::Mean { input: a, axis }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum_all());
        self.push(v, Op::SumAll(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.push(v, Op::Sigmoid(a))
    }

    /// Rows `ids` of a `[V×D]` table as a `[len×D]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table).gather_rows(ids)?;
        Ok(self.push(v, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Row-wise maximum of a `[D×T]` matrix over the valid columns, shape `[D]`.
    pub fn masked_max(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let (v, argmax) = masked_max(self.value(a), valid)?;
        Ok(self.push(v, Op::MaskedMax { input: a, argmax }))
    }

    /// Mean binary cross-entropy against a constant `{0,1}` target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = self.value(logits).bce_with_logits(target)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, target: target.clone() },
        ))
    }

    /// Fingerprint of every non-smooth choice made on the tape: ReLU input
    /// signs, masked-max winners and normalization floors. Two evaluations
    /// with equal fingerprints lie on the same smooth piece.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaskedMax { argmax, .. } => argmax.hash(&mut h),
                Op::L2Normalize { norms, .. } => {
                    let eps = T::lit(EPS);
                    for &n in norms {
                        (n <= eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a one-element `loss`. Every node that feeds the loss
    /// and requires a gradient gets one; [`Gradients::get`] returns zeros for
    /// the rest.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let fault = FAULT.with(|f| f.get());
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.input_grads(node, &g)?;
            if fault == Some(node.op.kind()) {
                for (_, c) in &mut contributions {
                    *c = c.scale(-T::one());
                }
            }
            for (input, c) in contributions {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, sum_to_shape(g, val(*a).shape())),
                (*b, sum_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, sum_to_shape(g, val(*a).shape())),
                (*b, sum_to_shape(&g.scale(-T::one()), val(*b).shape())),
            ],
            Op::Mul(a, b) => vec![
                (*a, sum_to_shape(&g.mul(val(*b))?, val(*a).shape())),
                (*b, sum_to_shape(&g.mul(val(*a))?, val(*b).shape())),
            ],
            Op::Scale(a, f) => vec![(*a, g.scale(*f))],
            Op::Matmul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose2d()?)?),
                (*b, val(*a).transpose2d()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose2d()?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    out.push((p, g.slice(*axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Slice { input, axis, start } => {
                let full = val(*input).shape();
                let len = g.shape()[*axis];
                let mut pieces = Vec::new();
                if *start > 0 {
                    let mut s = full.to_vec();
                    s[*axis] = *start;
                    pieces.push(Tensor::zeros(s));
                }
                pieces.push(g.clone());
                let tail = full[*axis] - start - len;
                if tail > 0 {
                    let mut s = full.to_vec();
                    s[*axis] = tail;
                    pieces.push(Tensor::zeros(s));
                }
                let refs: Vec<&Tensor<T>> = pieces.iter().collect();
                vec![(*input, Tensor::concat(&refs, *axis)?)]
            }
            Op::Softmax { input, axis } => vec![(*input, softmax_backward(&node.value, g, *axis))],
            Op::L2Normalize { input, norms } => {
                vec![(*input, l2_normalize_backward(&node.value, norms, g))]
            }
            Op::LayerNorm { input, inv_std } => {
                vec![(*input, layer_norm_backward(&node.value, inv_std, g))]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), g, *stride, *pad);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, gb));
                }
                out
            }
            Op::DynamicFilter { x, kernels, dilation } => {
                let (gx, gk) = dynamic_filter_backward(val(*x), val(*kernels), g, *dilation);
                vec![(*x, gx), (*kernels, gk)]
            }
            Op::Upsample2x(a) => vec![(*a, upsample2x_backward(val(*a).shape(), g))],
            Op::Sum { input, axis } => vec![(*input, expand_reduced(g, val(*input).shape(), *axis, T::one())?)],
            Op::Mean { input, axis } => {
                let n = T::lit(val(*input).shape()[*axis] as f64);
                vec![(*input, expand_reduced(g, val(*input).shape(), *axis, T::one() / n)?)]
            }
            Op::SumAll(a) => {
                let gv = g.item()?;
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), gv))]
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::from_vec(x.shape().to_vec(), data)?)]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                    .collect();
                vec![(*a, Tensor::from_vec(y.shape().to_vec(), data)?)]
            }
            Op::Embedding { table, ids } => {
                let shape = val(*table).shape();
                let d = shape[1];
                let mut out = vec![T::zero(); shape[0] * d];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        out[id * d + c] = out[id * d + c] + g.data()[row * d + c];
                    }
                }
                vec![(*table, Tensor::from_vec(shape.to_vec(), out)?)]
            }
            Op::MaskedMax { input, argmax } => {
                let shape = val(*input).shape();
                let t = shape[1];
                let mut out = vec![T::zero(); shape[0] * t];
                for (r, &c) in argmax.iter().enumerate() {
                    out[r * t + c] = g.data()[r];
                }
                vec![(*input, Tensor::from_vec(shape.to_vec(), out)?)]
            }
            Op::BceWithLogits { logits, target } => {
                vec![(*logits, bce_backward(val(*logits), target, g.item()?))]
            }
        })
    }
}

/// Broadcasts a reduced gradient back over the removed `axis`, times `factor`.
fn expand_reduced<T: Scalar>(g: &Tensor<T>, shape: &[usize], axis: usize, factor: T) -> Result<Tensor<T>> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if g.numel() != outer * inner {
        return Err(shape_err("reduce backward", format!("{:?} vs {:?}", g.shape(), shape)));
    }
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            out.extend(g.data()[o * inner..(o + 1) * inner].iter().map(|&v| v * factor));
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` is unreachable.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
