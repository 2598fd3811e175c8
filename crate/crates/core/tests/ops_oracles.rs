//! Tape ops against independent nested-loop implementations.

use lga_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn batched_matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // sizes straddle the small/blocked GEMM switch
    for &(b, m, k, p) in &[(3, 2, 4, 5), (2, 17, 31, 23), (1, 64, 40, 9)] {
        let a = randn(&mut rng, &[b, m, k]);
        let w = randn(&mut rng, &[k, p]);
        let mut tape = Tape::new();
        let (av, wv) = (tape.constant(a.clone()), tape.constant(w.clone()));
        let y = tape.matmul(av, wv).unwrap();
        let mut expect = vec![0.0; b * m * p];
        for bi in 0..b {
            for i in 0..m {
                for j in 0..p {
                    let mut s = 0.0;
                    for t in 0..k {
                        s += a.at(&[bi, i, t]) * w.at(&[t, j]);
                    }
                    expect[(bi * m + i) * p + j] = s;
                }
            }
        }
        assert_eq!(tape.shape(y), &[b, m, p]);
        close(tape.value(y).data(), &expect, 1e-12);
    }
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (b, ci, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let lo = (n + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..b {
        for o in 0..co {
            for t in 0..lo {
                let mut s = bias.data()[o];
                for c in 0..ci {
                    for j in 0..k {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < n {
                            s += w.at(&[o, c, j]) * x.at(&[bi, c, pos as usize]);
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

#[test]
fn conv1d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(b, ci, co, n, k, s, p) in &[(2, 3, 4, 11, 3, 1, 1), (1, 2, 5, 16, 7, 1, 3), (3, 4, 2, 13, 4, 3, 2), (2, 5, 5, 9, 1, 1, 0)] {
        let x = randn(&mut rng, &[b, ci, n]);
        let w = randn(&mut rng, &[co, ci, k]);
        let bias = randn(&mut rng, &[co]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
        let y = tape.conv1d(xv, wv, Some(bv), s, p).unwrap();
        close(tape.value(y).data(), &conv_oracle(&x, &w, &bias, s, p), 1e-12);
    }
}

#[test]
fn softmax_matches_exp_over_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[4, 6]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.softmax(xv, 1).unwrap();
    let mut expect = Vec::new();
    for r in 0..4 {
        let z: f64 = (0..6).map(|j| x.at(&[r, j]).exp()).sum();
        expect.extend((0..6).map(|j| x.at(&[r, j]).exp() / z));
    }
    close(tape.value(y).data(), &expect, 1e-15);
}

#[test]
fn softmax_row_shift_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[3, 5]);
    let mut shifted = x.clone();
    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
        if i / 5 == 1 {
            *v += 123.0;
        }
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x), tape.constant(shifted));
    let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
    assert!(tape.value(sa).max_abs_diff(tape.value(sb)) <= 1e-12);
}

#[test]
fn pools_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 10]);
    let (k, s) = (3, 2);
    let lo = (10 - k) / s + 1;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mx = tape.max_pool1d(xv, k, s).unwrap();
    let av = tape.avg_pool1d(xv, k, s).unwrap();
    let (mut em, mut ea) = (Vec::new(), Vec::new());
    for b in 0..2 {
        for c in 0..3 {
            for t in 0..lo {
                let w: Vec<f64> = (0..k).map(|j| x.at(&[b, c, t * s + j])).collect();
                em.push(w.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                ea.push(w.iter().sum::<f64>() / k as f64);
            }
        }
    }
    close(tape.value(mx).data(), &em, 0.0);
    close(tape.value(av).data(), &ea, 1e-15);
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[3, 7]);
    let g = randn(&mut rng, &[7]);
    let b = randn(&mut rng, &[7]);
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x.clone()), tape.constant(g.clone()), tape.constant(b.clone()));
    let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let mut expect = Vec::new();
    for r in 0..3 {
        let row: Vec<f64> = (0..7).map(|j| x.at(&[r, j])).collect();
        let mu = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 7.0;
        expect.extend((0..7).map(|j| (row[j] - mu) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j]));
    }
    close(tape.value(y).data(), &expect, 1e-12);
}

#[test]
fn bce_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = randn(&mut rng, &[8, 6]);
    let y = Tensor::new(vec![8, 6], (0..48).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let l = tape.bce_with_logits(zv, &y).unwrap();
    let direct: f64 = z
        .data()
        .iter()
        .zip(y.data())
        .map(|(&zi, &yi)| {
            let p = 1.0 / (1.0 + (-zi).exp());
            -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 48.0;
    assert!((tape.value(l).item() - direct).abs() <= 1e-10);
}

#[test]
fn bce_closed_forms() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::from_f64(&[2], &[0.0, 50.0]).unwrap());
    let l = tape.bce_with_logits(z, &Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap()).unwrap();
    // mean of ln 2 and ≈0
    assert!((tape.value(l).item() - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let data: Vec<f64> = (0..a * b * c).map(|i| i as f64).collect();
        let x = Tensor::new(vec![a, b, c], data).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = tape.permute(xv, &[2, 0, 1]).unwrap();
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn broadcast_add_matches_elementwise(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, &[rows, cols]);
        let b = randn(&mut rng, &[cols]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.add(av, bv).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(tape.value(y).at(&[r, c]), a.at(&[r, c]) + b.data()[c]);
            }
        }
    }
}
