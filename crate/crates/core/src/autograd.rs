//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value plus whatever the
//! backward pass needs. Node ids are assigned in execution order, so the tape
//! is already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{broadcast_shapes, broadcast_strides, gather_strided, numel, strides_of, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag, used in diagnostics and by the gradient-check harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Matmul,
    Softmax,
    Sum,
    Mean,
    SumAll,
    Permute,
    Reshape,
    Slice,
    Concat,
    BroadcastTo,
    Pad,
    IndexSelect,
    Conv1d,
    LayerNorm,
    MaxPool1d,
    AvgPool1d,
    Relu,
    Sigmoid,
    BceWithLogits,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Matmul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAll => "sum_all",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Slice => "slice",
            OpKind::Concat => "concat",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::Pad => "pad",
            OpKind::IndexSelect => "index_select",
            OpKind::Conv1d => "conv1d",
            OpKind::LayerNorm => "layer_norm",
            OpKind::MaxPool1d => "max_pool1d",
            OpKind::AvgPool1d => "avg_pool1d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

pub const ALL_OPS: [OpKind; 25] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Matmul,
    OpKind::Softmax,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::SumAll,
    OpKind::Permute,
    OpKind::Reshape,
    OpKind::Slice,
    OpKind::Concat,
    OpKind::BroadcastTo,
    OpKind::Pad,
    OpKind::IndexSelect,
    OpKind::Conv1d,
    OpKind::LayerNorm,
    OpKind::MaxPool1d,
    OpKind::AvgPool1d,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::BceWithLogits,
];

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul(Var, Var),
    Softmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    BroadcastTo(Var),
    Pad { x: Var, axis: usize, before: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    AvgPool1d { x: Var, kernel: usize, stride: usize },
    Relu(Var),
    Sigmoid(Var),
    BceWithLogits { logits: Var, targets: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumAll(..) => OpKind::SumAll,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::BroadcastTo(..) => OpKind::BroadcastTo,
            Op::Pad { .. } => OpKind::Pad,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MaxPool1d { .. } => OpKind::MaxPool1d,
            Op::AvgPool1d { .. } => OpKind::AvgPool1d,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::AddScalar(x) | Op::SumAll(x) | Op::Reshape(x) | Op::BroadcastTo(x) => vec![*x],
            Op::Relu(x) | Op::Sigmoid(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Pad { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::MaxPool1d { x, .. }
            | Op::AvgPool1d { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

/// Outer/axis/inner decomposition of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupt the backward rule of one op kind (gradients scaled by 1.5).
    /// Exists so the gradient-check harness can prove it detects faults.
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
                index,
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ── Elementwise ──────────────────────────────────────────────────────────

    fn broadcast_binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let out_shape = broadcast_shapes(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::shape(op, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()))
        })?;
        let xa = gather_strided(ta.data(), &out_shape, &broadcast_strides(ta.shape(), &out_shape), 0);
        let xb = gather_strided(tb.data(), &out_shape, &broadcast_strides(tb.shape(), &out_shape), 0);
        let data = xa.iter().zip(&xb).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| v * k).collect());
        self.push(out, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| v + k).collect());
        self.push(out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        );
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect());
        self.push(out, Op::Sigmoid(x))
    }

    // ── Linear algebra ───────────────────────────────────────────────────────

    /// Batched matrix product `[..., m, k] · [..., k, p]` with broadcast
    /// batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, p) = (plan.m, plan.k, plan.p);
        let mut out = vec![T::zero(); plan.batch * m * p];
        for (bi, c) in out.chunks_mut(m * p).enumerate() {
            let (oa, ob) = plan.offsets(bi);
            kernels::gemm_acc(&ta.data()[oa * m * k..], &tb.data()[ob * k * p..], c, m, k, p);
        }
        self.push(Tensor::from_parts(plan.out_shape.clone(), out), Op::Matmul(a, b))
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..n {
                    out[at(j)] *= inv;
                }
            }
        }
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::Softmax { x, axis })
    }

    // ── Reductions ───────────────────────────────────────────────────────────

    fn reduce_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(Vec<usize>, Vec<T>, usize)> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &t.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((shape, out, n))
    }

    /// Sum along `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out, _) = self.reduce_axis(x, axis, "sum")?;
        self.push(Tensor::from_parts(shape, out), Op::Sum { x, axis })
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut out, n) = self.reduce_axis(x, axis, "mean")?;
        let inv = T::one() / T::of(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::from_parts(shape, out), Op::Mean { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    // ── Layout ───────────────────────────────────────────────────────────────

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        self.push(out, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::shape("permute", "transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let strides = t.strides();
        let data = gather_strided(t.data(), &shape, &strides, start * strides[axis]);
        self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        match broadcast_shapes(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("cannot broadcast {:?} to {shape:?}", t.shape()),
                ))
            }
        }
        let data = gather_strided(t.data(), shape, &broadcast_strides(t.shape(), shape), 0);
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::BroadcastTo(x))
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("pad", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let m = n + before + after;
        let mut data = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            data[(o * m + before) * inner..(o * m + before + n) * inner]
                .copy_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = m;
        self.push(Tensor::from_parts(shape, data), Op::Pad { x, axis, before })
    }

    /// Select entries along `axis` by index (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("index_select", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("index_select", format!("index {bad} out of range for extent {n}")));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&t.data()[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        self.push(
            Tensor::from_parts(shape, data),
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    // ── Neural ops ───────────────────────────────────────────────────────────

    /// 1-D cross-correlation. `x: [B, C_in, L]`, `w: [C_out, C_in, k]`,
    /// `b: [C_out]`, symmetric zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", format!("expected rank-3 input and weight, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape("conv1d", format!("input channels {} vs weight {ws:?}", xs[1])));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be >= 1"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            len: xs[2],
            kernel: ws[2],
            stride,
            padding,
        };
        if geom.padded_len() < geom.kernel {
            return Err(Error::shape(
                "conv1d",
                format!("length {} + 2*{padding} < kernel {}", geom.len, geom.kernel),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape("conv1d", format!("bias {:?} vs {} channels", self.shape(b), geom.out_channels)));
            }
        }
        let out = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
        );
        let shape = vec![geom.batch, geom.out_channels, geom.out_len()];
        self.push(Tensor::from_parts(shape, out), Op::Conv1d { x, w, b, geom })
    }

    /// Layer normalization over the last axis, biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?}/beta {:?} vs last extent {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); t.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        self.push(
            Tensor::from_parts(t.shape().to_vec(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    fn pool_check(&self, x: Var, kernel: usize, stride: usize, op: &'static str) -> Result<(usize, usize, Vec<usize>)> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::shape(op, "scalar input"));
        }
        let len = *s.last().unwrap();
        if kernel == 0 || stride == 0 {
            return Err(Error::shape(op, "kernel and stride must be >= 1"));
        }
        if len < kernel {
            return Err(Error::shape(op, format!("length {len} < kernel {kernel}")));
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = kernels::pool_out_len(len, kernel, stride);
        Ok((numel(s) / len, len, shape))
    }

    /// Max pooling over the last axis; gradient routes to the first maximum.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (rows, len, shape) = self.pool_check(x, kernel, stride, "max_pool1d")?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), rows, len, kernel, stride);
        self.push(Tensor::from_parts(shape, out), Op::MaxPool1d { x, argmax })
    }

    /// Average pooling over the last axis.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (rows, len, shape) = self.pool_check(x, kernel, stride, "avg_pool1d")?;
        let out = kernels::avg_pool_forward(self.value(x).data(), rows, len, kernel, stride);
        self.push(Tensor::from_parts(shape, out), Op::AvgPool1d { x, kernel, stride })
    }

    /// Mean binary cross-entropy on logits, in the overflow-free form
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        let n = T::of(z.len() as f64);
        let total: T = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&zi, &yi)| zi.max(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        )
    }

    // ── Backward ─────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// trainable leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage(
                "backward called on a tensor detached from every trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut contributions = self.local_backward(node, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, c) in contributions.iter_mut() {
                    c.data_mut().iter_mut().for_each(|v| *v *= T::of(1.5));
                }
            }
            for (input, delta) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        // Keep only leaf gradients.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[id].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to_shape(g, val(*a).shape())),
                (*b, reduce_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => {
                let neg = Tensor::from_parts(g.shape().to_vec(), gd.iter().map(|&v| -v).collect());
                vec![
                    (*a, reduce_to_shape(g, val(*a).shape())),
                    (*b, reduce_to_shape(&neg, val(*b).shape())),
                ]
            }
            Op::Mul(a, b) => {
                let out_shape = g.shape();
                let ea = gather_strided(val(*a).data(), out_shape, &broadcast_strides(val(*a).shape(), out_shape), 0);
                let eb = gather_strided(val(*b).data(), out_shape, &broadcast_strides(val(*b).shape(), out_shape), 0);
                let ga = Tensor::from_parts(out_shape.to_vec(), gd.iter().zip(&eb).map(|(&x, &y)| x * y).collect());
                let gb = Tensor::from_parts(out_shape.to_vec(), gd.iter().zip(&ea).map(|(&x, &y)| x * y).collect());
                vec![
                    (*a, reduce_to_shape(&ga, val(*a).shape())),
                    (*b, reduce_to_shape(&gb, val(*b).shape())),
                ]
            }
            Op::Scale(x, k) => vec![(*x, Tensor::from_parts(g.shape().to_vec(), gd.iter().map(|&v| v * *k).collect()))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::BroadcastTo(x) => vec![(*x, reduce_to_shape(g, val(*x).shape()))],
            Op::Relu(x) => {
                let xv = val(*x).data();
                let d = gd.iter().zip(xv).map(|(&gv, &xi)| if xi > T::zero() { gv } else { T::zero() }).collect();
                vec![(*x, Tensor::from_parts(g.shape().to_vec(), d))]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                vec![(*x, Tensor::from_parts(g.shape().to_vec(), d))]
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let plan = MatmulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, p) = (plan.m, plan.k, plan.p);
                let mut da = vec![T::zero(); ta.len()];
                let mut db = vec![T::zero(); tb.len()];
                for bi in 0..plan.batch {
                    let (oa, ob) = plan.offsets(bi);
                    let gc = &gd[bi * m * p..(bi + 1) * m * p];
                    kernels::gemm_nt_acc(gc, &tb.data()[ob * k * p..(ob + 1) * k * p], &mut da[oa * m * k..(oa + 1) * m * k], m, k, p);
                    kernels::gemm_tn_acc(&ta.data()[oa * m * k..(oa + 1) * m * k], gc, &mut db[ob * k * p..(ob + 1) * k * p], m, k, p);
                }
                vec![
                    (*a, Tensor::from_parts(ta.shape().to_vec(), da)),
                    (*b, Tensor::from_parts(tb.shape().to_vec(), db)),
                ]
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: T = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(node.value.shape().to_vec(), d))]
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::of(n as f64)
                } else {
                    T::one()
                };
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        for (dv, &sv) in d[(o * n + j) * inner..(o * n + j + 1) * inner].iter_mut().zip(src) {
                            *dv = sv * scale;
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), d))]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv).expect("inverse permutation"))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape()).expect("same numel"))],
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    d[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), d))]
            }
            Op::Pad { x, axis, before } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let m = g.shape()[*axis];
                let mut d = Vec::with_capacity(numel(xs));
                for o in 0..outer {
                    d.extend_from_slice(&gd[(o * m + before) * inner..(o * m + before + n) * inner]);
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), d))]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let ps = val(p).shape();
                    let n = ps[*axis];
                    let mut d = Vec::with_capacity(numel(ps));
                    for o in 0..outer {
                        d.extend_from_slice(&gd[(o * total + offset) * inner..(o * total + offset + n) * inner]);
                    }
                    offset += n;
                    out.push((p, Tensor::from_parts(ps.to_vec(), d)));
                }
                out
            }
            Op::IndexSelect { x, axis, indices } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let m = indices.len();
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    for (slot, &i) in indices.iter().enumerate() {
                        let src = &gd[(o * m + slot) * inner..(o * m + slot + 1) * inner];
                        for (dv, &sv) in d[(o * n + i) * inner..(o * n + i + 1) * inner].iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), d))]
            }
            Op::Conv1d { x, w, b, geom } => {
                let grads = kernels::conv1d_backward(val(*x).data(), val(*w).data(), gd, *geom);
                let mut out = vec![
                    (*x, Tensor::from_parts(val(*x).shape().to_vec(), grads.dx)),
                    (*w, Tensor::from_parts(val(*w).shape().to_vec(), grads.dw)),
                ];
                if let Some(b) = b {
                    out.push((*b, Tensor::from_parts(vec![geom.out_channels], grads.db)));
                }
                out
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *g.shape().last().unwrap();
                let gam = val(*gamma).data();
                let rows = gd.len() / d;
                let inv_d = T::one() / T::of(d as f64);
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gy = T::zero();
                    let mut mean_gyx = T::zero();
                    for j in 0..d {
                        let gy = gr[j] * gam[j];
                        mean_gy += gy;
                        mean_gyx += gy * xr[j];
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_gy *= inv_d;
                    mean_gyx *= inv_d;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (gr[j] * gam[j] - mean_gy - xr[j] * mean_gyx);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(g.shape().to_vec(), dx)),
                    (*gamma, Tensor::from_parts(vec![d], dgamma)),
                    (*beta, Tensor::from_parts(vec![d], dbeta)),
                ]
            }
            Op::MaxPool1d { x, argmax } => {
                let xs = val(*x).shape();
                let mut d = vec![T::zero(); numel(xs)];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] += gv;
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), d))]
            }
            Op::AvgPool1d { x, kernel, stride } => {
                let xs = val(*x).shape();
                let len = *xs.last().unwrap();
                let d = kernels::avg_pool_backward(gd, numel(xs) / len, len, *kernel, *stride);
                vec![(*x, Tensor::from_parts(xs.to_vec(), d))]
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let scale = gd[0] / T::of(z.len() as f64);
                let d = z.data().iter().zip(targets).map(|(&zi, &yi)| (sigmoid(zi) - yi) * scale).collect();
                vec![(*logits, Tensor::from_parts(z.shape().to_vec(), d))]
            }
        }
    }
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Sum `g` down to `target` by folding broadcast axes.
fn reduce_to_shape<T: Element>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let out_shape = g.shape();
    let strides = broadcast_strides(target, out_shape);
    let mut out = vec![T::zero(); numel(target)];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for &v in g.data() {
        out[offset] += v;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

struct MatmulPlan {
    m: usize,
    k: usize,
    p: usize,
    batch: usize,
    batch_shape: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", format!("need rank >= 2 operands, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {a:?} · {b:?}")));
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch_shape = broadcast_shapes(ab, bb)
            .ok_or_else(|| Error::shape("matmul", format!("batch extents not broadcastable: {a:?} · {b:?}")))?;
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, p]);
        Ok(MatmulPlan {
            m,
            k,
            p,
            batch: numel(&batch_shape),
            a_batch_strides: broadcast_strides(ab, &batch_shape),
            b_batch_strides: broadcast_strides(bb, &batch_shape),
            batch_shape,
            out_shape,
        })
    }

    /// Matrix offsets (in units of whole matrices) of operands for output
    /// batch `bi`.
    fn offsets(&self, bi: usize) -> (usize, usize) {
        let mut rem = bi;
        let (mut oa, mut ob) = (0, 0);
        let strides = strides_of(&self.batch_shape);
        for (axis, s) in strides.iter().enumerate() {
            let i = rem / s;
            rem %= s;
            oa += i * self.a_batch_strides[axis];
            ob += i * self.b_batch_strides[axis];
        }
        (oa, ob)
    }
}
