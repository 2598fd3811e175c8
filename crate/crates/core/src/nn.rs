//! Parameter storage and the basic layers: 1-D convolution, layer norm,
//! linear.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] rather than tensors. A
//! forward pass first binds the whole store onto a tape ([`ParamStore::bind`])
//! and layers look their parameters up in the resulting [`Bound`] table, so
//! the same layer code serves training, inference and gradient checking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(
                "param",
                format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[id.0],
                    self.tensors[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Push every parameter onto `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Push every parameter as a constant (inference, no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform fan-in scaled init, `U(−1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

// ── Conv1d ───────────────────────────────────────────────────────────────────

/// 1-D convolution layer, `[B, C_in, L] → [B, C_out, L_out]` with
/// `L_out = (L + 2p − k)/stride + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, &[out_channels, in_channels, kernel], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), uniform_fan_in(rng, &[out_channels], fan_in));
        Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    /// Shape-preserving (stride 1, padding (k−1)/2) convolution; `kernel`
    /// must be odd.
    pub fn same<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("{name}: shape-preserving conv needs an odd kernel, got {kernel}")));
        }
        Ok(Self::new(store, rng, name, in_channels, out_channels, kernel, 1, (kernel - 1) / 2))
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        tape.conv1d(x, params.var(self.weight), Some(params.var(self.bias)), self.stride, self.padding)
    }

    /// Overwrite weights with an identity map (centre tap 1) and zero bias.
    /// Requires `in_channels == out_channels` and an odd kernel.
    pub fn set_identity<T: Element>(&self, store: &mut ParamStore<T>) {
        assert_eq!(self.in_channels, self.out_channels, "identity conv needs square channels");
        let (c, k) = (self.in_channels, self.kernel);
        let mut w = Tensor::zeros(&[c, c, k]);
        for i in 0..c {
            w.data_mut()[(i * c + i) * k + k / 2] = T::one();
        }
        *store.get_mut(self.weight) = w;
        *store.get_mut(self.bias) = Tensor::zeros(&[c]);
    }

    pub fn set_zero<T: Element>(&self, store: &mut ParamStore<T>) {
        let ws = store.get(self.weight).shape().to_vec();
        *store.get_mut(self.weight) = Tensor::zeros(&ws);
        *store.get_mut(self.bias) = Tensor::zeros(&[self.out_channels]);
    }
}

// ── LayerNorm ────────────────────────────────────────────────────────────────

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub dim: usize,
    pub eps: f64,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm {
            dim,
            eps: LAYER_NORM_EPS,
            gamma,
            beta,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, params.var(self.gamma), params.var(self.beta), self.eps)
    }
}

// ── Linear ───────────────────────────────────────────────────────────────────

/// `x · W + b` over the last axis, `W: [D_in, D_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(rng, &[in_dim, out_dim], in_dim));
        let bias = store.add(format!("{name}.bias"), uniform_fan_in(rng, &[out_dim], in_dim));
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, params.var(self.weight), params.var(self.bias))
    }

    pub fn set_zero<T: Element>(&self, store: &mut ParamStore<T>) {
        *store.get_mut(self.weight) = Tensor::zeros(&[self.in_dim, self.out_dim]);
        *store.get_mut(self.bias) = Tensor::zeros(&[self.out_dim]);
    }
}

/// `x[..., D_in] · w[D_in, D_out] + b[D_out]`.
pub fn linear<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let d_in = *xs.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
    let ws = tape.shape(w).to_vec();
    if ws.len() != 2 || ws[0] != d_in {
        return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
    }
    // Flatten leading axes so the product is one GEMM.
    let rows = xs.iter().product::<usize>() / d_in;
    let flat = tape.reshape(x, &[rows, d_in])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add(y, b)?;
    let mut out_shape = xs;
    *out_shape.last_mut().unwrap() = ws[1];
    tape.reshape(y, &out_shape)
}

/// `[B, N, D] ↔ [B, D, N]`.
pub fn swap_seq_channels<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 2, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let zb = tape.constant(Tensor::zeros(&[2]));
        let y = linear(&mut tape, x, eye, zb).unwrap();
        assert_eq!(tape.value(y).to_f64_vec(), vec![1., 2., 3., 4.]);

        let zw = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::from_f64(&[3], &[7., 8., 9.]).unwrap());
        let y = linear(&mut tape, x, zw, b).unwrap();
        assert_eq!(tape.value(y).to_f64_vec(), vec![7., 8., 9., 7., 8., 9.]);
    }

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut store, &mut rng, "fc", 2, 3);
        assert_eq!(store.num_elements(), 9);
        assert_eq!(ParamStore::<f32>::new().num_elements(), 0);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = uniform_fan_in(&mut rng, &[16, 4, 7], 28);
        let bound = 1.0 / 28f64.sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::same(&mut store, &mut rng, "c", 2, 2, 3).unwrap();
        conv.set_identity(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xt = Tensor::from_f64(&[1, 2, 4], &[1., 2., 3., 4., -1., -2., -3., -4.]).unwrap();
        let x = tape.constant(xt.clone());
        let y = conv.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), &xt);
    }
}
