//! Slice-level compute kernels used by the tape.
//!
//! Every kernel is deterministic: parallel loops only ever split work into
//! disjoint output regions, and cross-batch reductions run sequentially in
//! batch order.

use rayon::prelude::*;

use crate::tensor::{gemm_strided, Element};

// ── GEMM ─────────────────────────────────────────────────────────────────────

/// Inner product with eight interleaved partial sums, which lets the
/// compiler keep the reduction in vector registers. The summation order is
/// fixed, so results stay deterministic.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

/// Below this many multiply-adds the packing overhead of the blocked GEMM
/// outweighs its speed.
const SMALL_GEMM: usize = 4096;

/// `c[m×p] += a[m×k] · b[k×p]`
pub fn gemm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    if m * k * p >= SMALL_GEMM {
        return gemm_strided(m, k, p, a, (k, 1), b, (p, 1), c, (p, 1));
    }
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×p] · b[k×p]ᵀ`
pub fn gemm_nt_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    if m * k * p >= SMALL_GEMM {
        return gemm_strided(m, p, k, a, (p, 1), b, (1, p), c, (k, 1));
    }
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for kk in 0..k {
            c[i * k + kk] += dot(a_row, &b[kk * p..(kk + 1) * p]);
        }
    }
}

/// `c[k×p] += a[m×k]ᵀ · b[m×p]`
pub fn gemm_tn_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    if m * k * p >= SMALL_GEMM {
        return gemm_strided(k, m, p, a, (1, k), b, (p, 1), c, (p, 1));
    }
    for i in 0..m {
        let b_row = &b[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let c_row = &mut c[kk * p..(kk + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

// ── Conv1d ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn padded_len(&self) -> usize {
        self.len + 2 * self.padding
    }

    pub fn out_len(&self) -> usize {
        (self.padded_len() - self.kernel) / self.stride + 1
    }
}

/// Unfold one batch item `[C_in, L]` into `[C_in·k, L_out]` so that the
/// convolution becomes one matrix product.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (k, s, p, len) = (g.kernel, g.stride, g.padding as isize, g.len as isize);
    let lo = g.out_len();
    for c in 0..g.in_channels {
        let xr = &x[c * g.len..(c + 1) * g.len];
        for j in 0..k {
            let row = &mut col[(c * k + j) * lo..(c * k + j + 1) * lo];
            for (t, v) in row.iter_mut().enumerate() {
                let src = (t * s + j) as isize - p;
                *v = if (0..len).contains(&src) { xr[src as usize] } else { T::zero() };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `[C_in·k, L_out]` back into `[C_in, L]`.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p, len) = (g.kernel, g.stride, g.padding as isize, g.len as isize);
    let lo = g.out_len();
    for c in 0..g.in_channels {
        let dr = &mut dx[c * g.len..(c + 1) * g.len];
        for j in 0..k {
            let row = &col[(c * k + j) * lo..(c * k + j + 1) * lo];
            for (t, &v) in row.iter().enumerate() {
                let dst = (t * s + j) as isize - p;
                if (0..len).contains(&dst) {
                    dr[dst as usize] += v;
                }
            }
        }
    }
}

/// Cross-correlation: `out[b,o,t] = bias[o] + Σ_{c,j} w[o,c,j] · xpad[b,c,t·stride + j]`.
pub fn conv1d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: ConvGeom) -> Vec<T> {
    let (ci, co, k) = (g.in_channels, g.out_channels, g.kernel);
    let lo = g.out_len();
    let rows = ci * k;
    let mut out = vec![T::zero(); g.batch * co * lo];
    out.par_chunks_mut(co * lo).enumerate().for_each(|(b, ob)| {
        if let Some(bias) = bias {
            for (o, row) in ob.chunks_mut(lo).enumerate() {
                row.fill(bias[o]);
            }
        }
        let mut col = vec![T::zero(); rows * lo];
        im2col(&x[b * ci * g.len..(b + 1) * ci * g.len], &g, &mut col);
        gemm_strided(co, rows, lo, w, (rows, 1), &col, (lo, 1), ob, (lo, 1));
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv1d_backward<T: Element>(x: &[T], w: &[T], dout: &[T], g: ConvGeom) -> ConvGrads<T> {
    let (ci, co, k) = (g.in_channels, g.out_channels, g.kernel);
    let lo = g.out_len();
    let rows = ci * k;

    let mut cols = vec![T::zero(); g.batch * rows * lo];
    cols.par_chunks_mut(rows * lo).enumerate().for_each(|(b, col)| {
        im2col(&x[b * ci * g.len..(b + 1) * ci * g.len], &g, col);
    });

    let mut dx = vec![T::zero(); g.batch * ci * g.len];
    dx.par_chunks_mut(ci * g.len).enumerate().for_each(|(b, dxb)| {
        let mut dcol = vec![T::zero(); rows * lo];
        // dcol = wᵀ · dout_b
        gemm_strided(rows, co, lo, w, (1, rows), &dout[b * co * lo..(b + 1) * co * lo], (lo, 1), &mut dcol, (lo, 1));
        col2im(&dcol, &g, dxb);
    });

    // Batch items accumulate in order for a deterministic sum.
    let mut dw = vec![T::zero(); co * rows];
    for b in 0..g.batch {
        let col = &cols[b * rows * lo..(b + 1) * rows * lo];
        gemm_strided(co, lo, rows, &dout[b * co * lo..(b + 1) * co * lo], (lo, 1), col, (1, lo), &mut dw, (rows, 1));
    }

    let mut db = vec![T::zero(); co];
    for b in 0..g.batch {
        for (o, dbo) in db.iter_mut().enumerate() {
            for &gv in &dout[(b * co + o) * lo..(b * co + o + 1) * lo] {
                *dbo += gv;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

// ── Pooling ──────────────────────────────────────────────────────────────────

pub fn pool_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Max pooling over rows of length `len`; returns values and the flat
/// argmax (within the input) per output, lowest index on ties.
pub fn max_pool_forward<T: Element>(x: &[T], rows: usize, len: usize, kernel: usize, stride: usize) -> (Vec<T>, Vec<usize>) {
    let lo = pool_out_len(len, kernel, stride);
    let mut out = Vec::with_capacity(rows * lo);
    let mut arg = Vec::with_capacity(rows * lo);
    for r in 0..rows {
        let xr = &x[r * len..(r + 1) * len];
        for t in 0..lo {
            let start = t * stride;
            let mut best = start;
            for i in start + 1..start + kernel {
                if xr[i] > xr[best] {
                    best = i;
                }
            }
            out.push(xr[best]);
            arg.push(r * len + best);
        }
    }
    (out, arg)
}

pub fn avg_pool_forward<T: Element>(x: &[T], rows: usize, len: usize, kernel: usize, stride: usize) -> Vec<T> {
    let lo = pool_out_len(len, kernel, stride);
    let inv = T::one() / T::of(kernel as f64);
    let mut out = Vec::with_capacity(rows * lo);
    for r in 0..rows {
        let xr = &x[r * len..(r + 1) * len];
        for t in 0..lo {
            let mut acc = T::zero();
            for &v in &xr[t * stride..t * stride + kernel] {
                acc += v;
            }
            out.push(acc * inv);
        }
    }
    out
}

pub fn avg_pool_backward<T: Element>(dout: &[T], rows: usize, len: usize, kernel: usize, stride: usize) -> Vec<T> {
    let lo = pool_out_len(len, kernel, stride);
    let inv = T::one() / T::of(kernel as f64);
    let mut dx = vec![T::zero(); rows * len];
    for r in 0..rows {
        let dr = &mut dx[r * len..(r + 1) * len];
        for t in 0..lo {
            let gv = dout[r * lo + t] * inv;
            for dv in &mut dr[t * stride..t * stride + kernel] {
                *dv += gv;
            }
        }
    }
    dx
}
