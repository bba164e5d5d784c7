//! Forward kernels checked against naive loop implementations.

use evctx_core::autograd::Tape;
use evctx_core::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

/// Per window, per head: softmax(q k^T / sqrt(dh)) v, with every exponential
/// taken relative to zero rather than the row maximum.
fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, len: usize) -> Vec<f64> {
    let (rows, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let mut out = vec![0.0; rows * d];
    for w in 0..rows / len {
        for h in 0..heads {
            for i in 0..len {
                let qi = w * len + i;
                let scores: Vec<f64> = (0..len)
                    .map(|j| {
                        let kj = w * len + j;
                        let s: f64 = (0..dh).map(|c| q.at(qi, h * dh + c) * k.at(kj, h * dh + c)).sum();
                        (s / (dh as f64).sqrt()).exp()
                    })
                    .collect();
                let z: f64 = scores.iter().sum();
                for c in 0..dh {
                    out[qi * d + h * dh + c] = (0..len).map(|j| scores[j] / z * v.at(w * len + j, h * dh + c)).sum();
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(m, k, n)| (tensor(m, k), tensor(k, n)))) {
        let got = a.matmul(&b).unwrap();
        prop_assert_eq!(got.shape(), &[a.rows(), b.cols()]);
        prop_assert!(close(got.data(), &naive_matmul(&a, &b), 1e-12));
    }

    #[test]
    fn attention_matches_naive(
        (q, k, v, heads, len) in (1usize..3, 2usize..5, 1usize..3, 1usize..4)
            .prop_flat_map(|(w, len, heads, dh)| {
                let (r, d) = (w * len, heads * dh);
                (tensor(r, d), tensor(r, d), tensor(r, d), Just(heads), Just(len))
            })
    ) {
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = tape.attention(qv, kv, vv, heads, len).unwrap();
        prop_assert!(close(tape.value(out).data(), &naive_attention(&q, &k, &v, heads, len), 1e-10));
        let probs = tape.attention_weights(out).unwrap();
        for row in probs.chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in tensor(4, 5)) {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        for r in 0..4 {
            let row = tape.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(x in tensor(3, 4), c in -50.0f64..50.0) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + c));
        let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
    }

    #[test]
    fn l2_normalize_gives_unit_rows(x in tensor(5, 3)) {
        prop_assume!((0..5).all(|r| x.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let n = tape.l2_normalize(v).unwrap();
        for r in 0..5 {
            prop_assert!((tape.value(n).row(r).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in tensor(3, 6)) {
        let spread = (0..3).all(|r| {
            let row = x.row(r);
            row.iter().fold(f64::MIN, |a, &b| a.max(b)) - row.iter().fold(f64::MAX, |a, &b| a.min(b)) > 0.1
        });
        prop_assume!(spread);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(v, g, b, 1e-12).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax(x in tensor(4, 3), t in prop::collection::vec(0usize..3, 4)) {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let l = tape.cross_entropy(v, &t).unwrap();
        let expect: f64 = (0..4)
            .map(|r| {
                let row = x.row(r);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[t[r]].exp() / z).ln()
            })
            .sum::<f64>() / 4.0;
        prop_assert!((tape.value(l).item() - expect).abs() < 1e-10);
    }
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    assert!(matches!(a.matmul(&b), Err(evctx_core::Error::Shape { .. })));
}
