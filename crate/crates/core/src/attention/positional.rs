//! Positional encodings for the attention ablations.
//!
//! Absolute encodings are `[positions, D]` tables summed onto projected
//! embeddings. The relative encoding is a per-head bias indexed by the
//! clipped offset between key and query positions and added to the scores
//! before the softmax.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::PosEncoding;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// `pe[p, 2i] = sin(p / 10000^(2i/D))`, `pe[p, 2i+1] = cos(p / 10000^(2i/D))`.
pub fn sinusoidal_table<T: Element>(positions: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions * dim);
    for p in 0..positions {
        for j in 0..dim {
            let pair = (j / 2) * 2;
            let angle = p as f64 / 10000f64.powf(pair as f64 / dim as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![positions, dim], data).expect("table shape")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Positional {
    None,
    /// Fixed table; not a parameter.
    Sinusoidal { capacity: usize },
    Learnable { table: ParamId, capacity: usize },
    /// `table: [H, 2·max_offset + 1]`.
    Relative { table: ParamId, max_offset: usize },
}

impl Positional {
    /// `capacity` is the number of absolute positions the table covers;
    /// `max_offset` the clip radius for relative offsets.
    pub fn new<T: Element>(
        kind: PosEncoding,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        capacity: usize,
        max_offset: usize,
    ) -> Self {
        match kind {
            PosEncoding::None => Positional::None,
            PosEncoding::SinusoidalApe => Positional::Sinusoidal { capacity },
            PosEncoding::LearnableApe => {
                let data = (0..capacity * dim).map(|_| T::of(rng.random_range(-0.02..=0.02))).collect();
                let table = store.add(format!("{name}.pos_table"), Tensor::new(vec![capacity, dim], data).unwrap());
                Positional::Learnable { table, capacity }
            }
            PosEncoding::Relative => {
                // Zero start: the layer begins identical to the un-encoded one.
                let table = store.add(format!("{name}.rel_bias"), Tensor::zeros(&[heads, 2 * max_offset + 1]));
                Positional::Relative { table, max_offset }
            }
        }
    }

    pub fn is_absolute(&self) -> bool {
        matches!(self, Positional::Sinusoidal { .. } | Positional::Learnable { .. })
    }

    /// Rows `start..start+len` of the absolute table as `[len, D]`, or
    /// `None` when this encoding is not absolute.
    pub fn absolute_rows<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        dim: usize,
        start: usize,
        len: usize,
    ) -> Result<Option<Var>> {
        let capacity = match self {
            Positional::Sinusoidal { capacity } | Positional::Learnable { capacity, .. } => *capacity,
            _ => return Ok(None),
        };
        if start + len > capacity {
            return Err(Error::config(format!(
                "positions {start}..{} exceed positional table capacity {capacity}",
                start + len
            )));
        }
        let table = match self {
            Positional::Sinusoidal { .. } => tape.constant(sinusoidal_table(capacity, dim)),
            Positional::Learnable { table, .. } => params.var(*table),
            _ => unreachable!(),
        };
        tape.slice(table, 0, start, len).map(Some)
    }

    /// Add the absolute encoding for positions `start..` onto a
    /// channel-major `[B, D, L]` tensor.
    pub fn add_channel_major<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        x: Var,
        start: usize,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (dim, len) = (s[1], s[2]);
        match self.absolute_rows(tape, params, dim, start, len)? {
            Some(rows) => {
                let cm = tape.transpose_last(rows)?;
                tape.add(x, cm)
            }
            None => Ok(x),
        }
    }

    /// Add the absolute encoding for positions `start..` onto `[B, L, D]`.
    pub fn add_sequence_major<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var, start: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (len, dim) = (s[1], s[2]);
        match self.absolute_rows(tape, params, dim, start, len)? {
            Some(rows) => tape.add(x, rows),
            None => Ok(x),
        }
    }

    /// Relative bias of shape `[H, ..query_shape, ..key_shape]` where entry
    /// `(q, k)` reads the table at `clip(key_pos[k] − query_pos[q])`.
    /// `query_pos`/`key_pos` are given in the same coordinate frame.
    pub fn relative_bias<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        heads: usize,
        query_pos: &[i64],
        key_pos: &[i64],
        shape_tail: &[usize],
    ) -> Result<Option<Var>> {
        let Positional::Relative { table, max_offset } = self else {
            return Ok(None);
        };
        let r = *max_offset as i64;
        let mut indices = Vec::with_capacity(query_pos.len() * key_pos.len());
        for &q in query_pos {
            for &k in key_pos {
                indices.push(((k - q).clamp(-r, r) + r) as usize);
            }
        }
        let gathered = tape.index_select(params.var(*table), 1, &indices)?;
        let mut shape = vec![heads];
        shape.extend_from_slice(shape_tail);
        tape.reshape(gathered, &shape).map(Some)
    }
}
