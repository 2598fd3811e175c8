//! Local-global attention and its ablation variants.
//!
//! All variants share one layer type, [`AttentionLayer`], which maps a
//! `[B, N, D]` sequence to `[B, M, D]`. For the local-global mechanism the
//! pipeline is:
//!
//! 1. layer-normalize `x`;
//! 2. queries: convolve the (edge-padded) sequence with a length-preserving
//!    kernel and average-pool with kernel `l`, stride `s`, giving one averaged
//!    embedding per overlapping window;
//! 3. keys and values: length-preserving convolutions over the whole
//!    normalized sequence;
//! 4. multi-head scaled dot-product attention of the `M` queries over all
//!    `N` keys;
//! 5. add the queries back onto the attended values.
//!
//! In halving mode the normalized sequence is padded by `(l − s)/2` zeros on
//! each side before windowing, so `M = N/s` exactly.

pub mod config;
pub mod positional;

pub use config::{window_count, AttentionVariant, LgaConfig, PosEncoding, QueryPath, WindowMode};
pub use positional::{sinusoidal_table, Positional};

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, LayerNorm, Linear, ParamStore};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq)]
pub enum Projections {
    Conv { q: Conv1d, k: Conv1d, v: Conv1d },
    Linear { q: Linear, k: Linear, v: Linear },
}

/// One attention layer with its own input layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub cfg: LgaConfig,
    /// Input sequence length the positional tables were sized for.
    pub seq_len: usize,
    pub norm: LayerNorm,
    pub proj: Projections,
    pub pos: Positional,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    /// Post-softmax attention weights; rows lie along the last axis.
    pub attention: Var,
    /// Stacked query tensor `[B, M, D]` re-added as a residual, when the
    /// variant has one.
    pub queries: Option<Var>,
}

impl AttentionLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: LgaConfig,
        seq_len: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        cfg.output_len(seq_len)?;
        let d = cfg.embed_dim;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let kv = cfg.kv_kernel_size();
        let proj = match cfg.variant {
            AttentionVariant::Lga | AttentionVariant::LocalQkv => Projections::Conv {
                q: Conv1d::new(store, rng, &format!("{name}.q"), d, d, cfg.query_kernel, 1, cfg.q_padding()),
                k: Conv1d::same(store, rng, &format!("{name}.k"), d, d, kv)?,
                v: Conv1d::same(store, rng, &format!("{name}.v"), d, d, kv)?,
            },
            AttentionVariant::GlobalQkv => Projections::Conv {
                q: Conv1d::same(store, rng, &format!("{name}.q"), d, d, kv)?,
                k: Conv1d::same(store, rng, &format!("{name}.k"), d, d, kv)?,
                v: Conv1d::same(store, rng, &format!("{name}.v"), d, d, kv)?,
            },
            AttentionVariant::VitLike | AttentionVariant::SwinLike => Projections::Linear {
                q: Linear::new(store, rng, &format!("{name}.q"), d, d),
                k: Linear::new(store, rng, &format!("{name}.k"), d, d),
                v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            },
        };
        let (capacity, max_offset) = position_extent(&cfg, seq_len);
        let pos = Positional::new(cfg.pos_encoding, store, rng, name, d, cfg.heads, capacity, max_offset);
        Ok(AttentionLayer {
            cfg,
            seq_len,
            norm,
            proj,
            pos,
        })
    }

    pub fn output_len(&self, n: usize) -> Result<usize> {
        self.cfg.output_len(n)
    }

    fn conv_projections(&self) -> (&Conv1d, &Conv1d, &Conv1d) {
        match &self.proj {
            Projections::Conv { q, k, v } => (q, k, v),
            Projections::Linear { .. } => panic!("variant {} has linear projections", self.cfg.variant.tag()),
        }
    }

    /// Layer norm followed by the configured attention variant.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<AttentionOutput> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.cfg.embed_dim {
            return Err(Error::shape(
                "attention",
                format!("expected [B, N, {}], got {:?}", self.cfg.embed_dim, s),
            ));
        }
        let xn = self.norm.forward(tape, params, x)?;
        self.forward_normalized(tape, params, xn)
    }

    /// Attention on an already-normalized `[B, N, D]` input.
    pub fn forward_normalized<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<AttentionOutput> {
        match self.cfg.variant {
            AttentionVariant::Lga => self.local_global(tape, params, xn),
            AttentionVariant::GlobalQkv => self.global_qkv(tape, params, xn),
            AttentionVariant::LocalQkv => self.local_qkv(tape, params, xn),
            AttentionVariant::VitLike => self.vit_like(tape, params, xn),
            AttentionVariant::SwinLike => self.swin_like(tape, params, xn),
        }
    }

    /// Averaged window queries `[B, M, D]` from a normalized `[B, N, D]`
    /// sequence, via the configured [`QueryPath`].
    pub fn local_queries<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<Var> {
        self.local_queries_via(tape, params, xn, self.cfg.query_path)
    }

    pub fn local_queries_via<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var, path: QueryPath) -> Result<Var> {
        let (conv_q, _, _) = self.conv_projections();
        let cfg = &self.cfg;
        let n = tape.shape(xn)[1];
        let m = window_count(n, cfg.window_len, cfg.stride, cfg.window_mode)?;
        let pad = cfg.edge_padding();
        let xt = tape.permute(xn, &[0, 2, 1])?;
        let q = match path {
            QueryPath::Pooled => {
                let xp = if pad > 0 { tape.pad(xt, 2, pad, pad)? } else { xt };
                let qc = conv_q.forward(tape, params, xp)?;
                let qc = self.pos.add_channel_major(tape, params, qc, 0)?;
                let pooled = tape.avg_pool1d(qc, cfg.query_pool_len(), cfg.stride)?;
                debug_assert_eq!(tape.shape(pooled)[2], m);
                pooled
            }
            QueryPath::Windowed => {
                let ctx = pad + cfg.q_padding();
                let xp = if ctx > 0 { tape.pad(xt, 2, ctx, ctx)? } else { xt };
                let span = cfg.window_len + 2 * cfg.q_padding();
                let (w, b) = (params.var(conv_q.weight), params.var(conv_q.bias));
                let mut stacked = Vec::with_capacity(m);
                for i in 0..m {
                    let win = tape.slice(xp, 2, i * cfg.stride, span)?;
                    let conv = tape.conv1d(win, w, Some(b), 1, 0)?;
                    let conv = self.pos.add_channel_major(tape, params, conv, i * cfg.stride)?;
                    let avg = tape.mean(conv, 2)?;
                    let s = tape.shape(avg).to_vec();
                    stacked.push(tape.reshape(avg, &[s[0], s[1], 1])?);
                }
                tape.concat(&stacked, 2)?
            }
        };
        tape.permute(q, &[0, 2, 1])
    }

    /// Keys and values `[B, N, D]` from length-preserving convolutions over
    /// the whole normalized sequence.
    pub fn global_kv<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<(Var, Var)> {
        let (_, conv_k, conv_v) = self.conv_projections();
        let xt = tape.permute(xn, &[0, 2, 1])?;
        let offset = match self.cfg.variant {
            AttentionVariant::GlobalQkv => 0,
            _ => self.cfg.edge_padding(),
        };
        let k = conv_k.forward(tape, params, xt)?;
        let k = self.pos.add_channel_major(tape, params, k, offset)?;
        let v = conv_v.forward(tape, params, xt)?;
        let v = self.pos.add_channel_major(tape, params, v, offset)?;
        Ok((tape.permute(k, &[0, 2, 1])?, tape.permute(v, &[0, 2, 1])?))
    }

    fn local_global<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<AttentionOutput> {
        let cfg = &self.cfg;
        let q = self.local_queries(tape, params, xn)?;
        let (k, v) = self.global_kv(tape, params, xn)?;
        let (m, n) = (tape.shape(q)[1], tape.shape(k)[1]);
        let half = (cfg.window_len / 2) as i64;
        let q_pos: Vec<i64> = (0..m).map(|i| (i * cfg.stride) as i64 + half).collect();
        let pad = cfg.edge_padding() as i64;
        let k_pos: Vec<i64> = (0..n as i64).map(|j| j + pad).collect();
        let bias = self.pos.relative_bias(tape, params, cfg.heads, &q_pos, &k_pos, &[m, n])?;
        self.global_attention(tape, q, k, v, bias)
    }

    fn global_qkv<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<AttentionOutput> {
        let cfg = &self.cfg;
        let (conv_q, _, _) = self.conv_projections();
        let xt = tape.permute(xn, &[0, 2, 1])?;
        let qc = conv_q.forward(tape, params, xt)?;
        let qc = self.pos.add_channel_major(tape, params, qc, 0)?;
        let q = tape.avg_pool1d(qc, cfg.stride, cfg.stride)?;
        let q = tape.permute(q, &[0, 2, 1])?;
        let (k, v) = self.global_kv(tape, params, xn)?;
        let (m, n) = (tape.shape(q)[1], tape.shape(k)[1]);
        let half = (cfg.stride / 2) as i64;
        let q_pos: Vec<i64> = (0..m).map(|i| (i * cfg.stride) as i64 + half).collect();
        let k_pos: Vec<i64> = (0..n as i64).collect();
        let bias = self.pos.relative_bias(tape, params, cfg.heads, &q_pos, &k_pos, &[m, n])?;
        self.global_attention(tape, q, k, v, bias)
    }

    /// `softmax(Q_h K_hᵀ/√D_h + bias) V_h` per head, heads concatenated,
    /// plus the query residual.
    fn global_attention<T: Element>(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<AttentionOutput> {
        let h = self.cfg.heads;
        let qh = split_heads(tape, q, h)?;
        let kt = split_heads_transposed(tape, k, h)?;
        let vh = split_heads(tape, v, h)?;
        let (o, attention) = attend(tape, qh, kt, vh, bias, self.cfg.head_dim())?;
        let o = merge_heads(tape, o)?;
        let output = tape.add(o, q)?;
        Ok(AttentionOutput {
            output,
            attention,
            queries: Some(q),
        })
    }

    fn local_qkv<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<AttentionOutput> {
        let cfg = &self.cfg;
        let (_, conv_k, conv_v) = self.conv_projections();
        let (h, dh, l) = (cfg.heads, cfg.head_dim(), cfg.window_len);
        let q = self.local_queries(tape, params, xn)?;
        let s = tape.shape(q).to_vec();
        let (b, m, d) = (s[0], s[1], s[2]);

        // keys/values on the same padded frame the query windows use
        let pad = cfg.edge_padding();
        let xt = tape.permute(xn, &[0, 2, 1])?;
        let xp = if pad > 0 { tape.pad(xt, 2, pad, pad)? } else { xt };
        let indices: Vec<usize> = (0..m).flat_map(|i| (0..l).map(move |t| i * cfg.stride + t)).collect();
        let mut windows = Vec::with_capacity(2);
        for conv in [conv_k, conv_v] {
            let c = conv.forward(tape, params, xp)?;
            let c = self.pos.add_channel_major(tape, params, c, 0)?;
            let c = tape.permute(c, &[0, 2, 1])?;
            let w = tape.index_select(c, 1, &indices)?;
            windows.push(tape.reshape(w, &[b, m, l, h, dh])?);
        }
        let kt = tape.permute(windows[0], &[0, 3, 1, 4, 2])?; // [B,H,M,Dh,l]
        let vh = tape.permute(windows[1], &[0, 3, 1, 2, 4])?; // [B,H,M,l,Dh]
        let q5 = tape.reshape(q, &[b, m, 1, h, dh])?;
        let qh = tape.permute(q5, &[0, 3, 1, 2, 4])?; // [B,H,M,1,Dh]

        let centre = [(l / 2) as i64];
        let k_pos: Vec<i64> = (0..l as i64).collect();
        let bias = self.pos.relative_bias(tape, params, h, &centre, &k_pos, &[1, 1, l])?;
        let (o, attention) = attend(tape, qh, kt, vh, bias, dh)?;
        let o = tape.permute(o, &[0, 2, 3, 1, 4])?; // [B,M,1,H,Dh]
        let o = tape.reshape(o, &[b, m, d])?;
        let output = tape.add(o, q)?;
        Ok(AttentionOutput {
            output,
            attention,
            queries: Some(q),
        })
    }

    fn linear_qkv<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<(Var, Var, Var)> {
        let Projections::Linear { q, k, v } = &self.proj else {
            panic!("variant {} has conv projections", self.cfg.variant.tag());
        };
        let mut out = [xn; 3];
        for (slot, lin) in out.iter_mut().zip([q, k, v]) {
            let y = lin.forward(tape, params, xn)?;
            *slot = self.pos.add_sequence_major(tape, params, y, 0)?;
        }
        Ok((out[0], out[1], out[2]))
    }

    fn vit_like<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<AttentionOutput> {
        let h = self.cfg.heads;
        let (q, k, v) = self.linear_qkv(tape, params, xn)?;
        let n = tape.shape(q)[1];
        let pos: Vec<i64> = (0..n as i64).collect();
        let bias = self.pos.relative_bias(tape, params, h, &pos, &pos, &[n, n])?;
        let qh = split_heads(tape, q, h)?;
        let kt = split_heads_transposed(tape, k, h)?;
        let vh = split_heads(tape, v, h)?;
        let (o, attention) = attend(tape, qh, kt, vh, bias, self.cfg.head_dim())?;
        Ok(AttentionOutput {
            output: merge_heads(tape, o)?,
            attention,
            queries: None,
        })
    }

    fn swin_like<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, xn: Var) -> Result<AttentionOutput> {
        let cfg = &self.cfg;
        let s = tape.shape(xn).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        cfg.output_len(n)?;
        let w = cfg.window_len.min(n);
        let (h, dh, nw) = (cfg.heads, cfg.head_dim(), n / w);
        let (q, k, v) = self.linear_qkv(tape, params, xn)?;
        let mut windowed = [q; 3];
        for (slot, (t, perm)) in windowed
            .iter_mut()
            .zip([(q, [0, 1, 3, 2, 4]), (k, [0, 1, 3, 4, 2]), (v, [0, 1, 3, 2, 4])])
        {
            let r = tape.reshape(t, &[b, nw, w, h, dh])?;
            *slot = tape.permute(r, &perm)?;
        }
        let pos: Vec<i64> = (0..w as i64).collect();
        let bias = self.pos.relative_bias(tape, params, h, &pos, &pos, &[w, w])?;
        let (o, attention) = attend(tape, windowed[0], windowed[1], windowed[2], bias, dh)?;
        let o = tape.permute(o, &[0, 1, 3, 2, 4])?; // [B,nw,w,H,Dh]
        let o = tape.reshape(o, &[b, n, d])?;
        let ot = tape.permute(o, &[0, 2, 1])?;
        let pooled = tape.avg_pool1d(ot, 2, 2)?;
        Ok(AttentionOutput {
            output: tape.permute(pooled, &[0, 2, 1])?,
            attention,
            queries: None,
        })
    }
}

/// Positional table capacity and relative clip radius for a layer.
fn position_extent(cfg: &LgaConfig, n: usize) -> (usize, usize) {
    match cfg.variant {
        AttentionVariant::Lga | AttentionVariant::LocalQkv => {
            let padded = n + 2 * cfg.edge_padding();
            let q_conv_len = (padded + 2 * cfg.q_padding() + 1).saturating_sub(cfg.query_kernel);
            let radius = if cfg.variant == AttentionVariant::LocalQkv { cfg.window_len } else { padded };
            (padded.max(q_conv_len), radius)
        }
        AttentionVariant::GlobalQkv | AttentionVariant::VitLike => (n, n),
        AttentionVariant::SwinLike => (n, cfg.window_len.min(n)),
    }
}

/// `[B, L, D] → [B, H, L, D_h]`
pub fn split_heads<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, L, D] → [B, H, D_h, L]`
pub fn split_heads_transposed<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 3, 1])
}

/// `[B, H, L, D_h] → [B, L, H·D_h]`
pub fn merge_heads<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Scaled dot-product attention on pre-split heads: `q: [.., M, D_h]`,
/// `kt: [.., D_h, N]`, `v: [.., N, D_h]`. Returns `(output, weights)`.
pub fn attend<T: Element>(tape: &mut Tape<T>, q: Var, kt: Var, v: Var, bias: Option<Var>, head_dim: usize) -> Result<(Var, Var)> {
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::of(head_dim as f64).sqrt())?;
    let scores = match bias {
        Some(b) => tape.add(scores, b)?,
        None => scores,
    };
    let last = tape.shape(scores).len() - 1;
    let weights = tape.softmax(scores, last)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn run(cfg: LgaConfig, n: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", cfg, n).unwrap();
        let x = input(&mut rng, &[2, n, cfg.embed_dim]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let out = layer.forward(&mut tape, &p, xv).unwrap();
        (tape.value(out.output).clone(), tape.value(out.attention).clone())
    }

    #[test]
    fn every_variant_and_encoding_has_expected_shape_and_unit_rows() {
        for v in AttentionVariant::ALL {
            for pe in PosEncoding::ALL {
                let cfg = LgaConfig::new(8, 2, 4).with_variant(v).with_pos_encoding(pe);
                let (y, a) = run(cfg, 16);
                let m = if v == AttentionVariant::VitLike { 16 } else { 8 };
                assert_eq!(y.shape(), &[2, m, 8], "{v:?} {pe:?}");
                let row = *a.shape().last().unwrap();
                for r in a.data().chunks(row) {
                    let s: f64 = r.iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn windowed_queries_match_pooled() {
        for mode in [WindowMode::Halving, WindowMode::Unpadded] {
            for pe in [PosEncoding::None, PosEncoding::SinusoidalApe] {
                let mut cfg = LgaConfig::new(8, 2, 6).with_pos_encoding(pe);
                cfg.window_mode = mode;
                let (a, _) = run(cfg, 16);
                cfg.query_path = QueryPath::Windowed;
                let (b, _) = run(cfg, 16);
                assert!(a.max_abs_diff(&b) < 1e-12, "{mode:?} {pe:?}");
            }
        }
    }
}
