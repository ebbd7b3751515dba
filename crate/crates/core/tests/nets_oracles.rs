//! Networks checked against a standalone reimplementation and finite differences.

use metaref_core::diffengine::{Graph, Tensor};
use metaref_core::nets::{Head, MetaRefParams, ModelParams, ModelShape, RefereeShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain nested-loop dense layer: `x W + b`.
fn dense(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| b.get(0, j) + (0..w.rows()).map(|i| row[i] * w.get(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn relu(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

fn reference_encode(p: &ModelParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = p.tensors();
    let mut h = relu(dense(x, &t[0], &t[1]));
    for layer in 1..p.shape().depth {
        let r = relu(dense(&h, &t[2 * layer], &t[2 * layer + 1]));
        h = h
            .iter()
            .zip(r)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
    }
    h
}

fn reference_predict(p: &ModelParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = p.tensors();
    let n = t.len();
    let z = dense(&reference_encode(p, x), &t[n - 2], &t[n - 1]);
    match p.shape().head {
        Head::Regression => z,
        Head::Classification { .. } => z
            .into_iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect(),
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

#[test]
fn encode_and_predict_match_standalone_reimplementation() {
    for head in [Head::Regression, Head::Classification { classes: 2 }] {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let shape = ModelShape::new(4, 8, 4, head).unwrap();
        let params = ModelParams::init(shape, &mut rng);
        let rows = random_rows(&mut rng, 6, 4);
        let x = Tensor::from_rows(&rows);
        let h = params.encode(&x).unwrap();
        let y = params.predict(&x).unwrap();
        for (r, (eh, ey)) in reference_encode(&params, &rows)
            .iter()
            .zip(reference_predict(&params, &rows))
            .enumerate()
        {
            for (a, b) in h.row(r).iter().zip(eh) {
                assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in y.row(r).iter().zip(&ey) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn referee_matches_standalone_forward_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = RefereeShape::new(4, 6).unwrap();
    let w = MetaRefParams::init(shape, &mut rng);
    let summary = [0.3, -0.1, 0.8, 1.2];
    let rel = -0.05;
    let input: Vec<f64> = summary.iter().copied().chain([rel]).collect();
    let t = w.tensors();
    let h = relu(dense(&[input], &t[0], &t[1]));
    let expected = dense(&h, &t[2], &t[3])[0][0];
    let got = w.factor(&summary, rel).unwrap();
    assert!((got - expected).abs() <= 1e-12);
    // purely functional: same inputs, same factor
    assert_eq!(w.factor(&summary, rel).unwrap().to_bits(), got.to_bits());
}

#[test]
fn predictor_gradients_match_finite_differences() {
    let h = 1e-5;
    for head in [Head::Regression, Head::Classification { classes: 2 }] {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let shape = ModelShape::new(3, 5, 3, head).unwrap();
        let params = ModelParams::init(shape, &mut rng);
        let rows = random_rows(&mut rng, 5, 3);
        let x = Tensor::from_rows(&rows);
        // scalar loss: sum of squared outputs weighted by column index + 1
        let loss_of = |p: &ModelParams| -> f64 {
            let y = p.predict(&x).unwrap();
            (0..y.rows())
                .flat_map(|r| (0..y.cols()).map(move |c| (r, c)))
                .map(|(r, c)| (c as f64 + 1.0) * y.get(r, c).powi(2))
                .sum()
        };
        let mut g = Graph::new();
        let vars = params.load(&mut g);
        let xv = g.constant(x.clone());
        let y = shape.predict(&mut g, &vars, xv).unwrap();
        let (r, c) = g.shape(y);
        let weights = Tensor::new(r, c, (0..r * c).map(|i| (i % c) as f64 + 1.0).collect());
        let wv = g.constant(weights);
        let sq = g.square(y);
        let weighted = g.mul(sq, wv);
        let loss = g.sum(weighted);
        assert!((g.item(loss) - loss_of(&params)).abs() < 1e-12);
        let grads = g.gradients(loss, &vars).unwrap();
        for (ti, grad) in grads.iter().enumerate() {
            for k in 0..grad.len() {
                let mut hi = params.clone();
                hi.tensors_mut()[ti].data_mut()[k] += h;
                let mut lo = params.clone();
                lo.tensors_mut()[ti].data_mut()[k] -= h;
                let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
                let ad = grad.data()[k];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
                assert!(rel <= 1e-4, "{head} tensor {ti} entry {k}: {ad} vs {fd}");
            }
        }
    }
}

proptest! {
    #[test]
    fn predict_is_permutation_equivariant(seed in 0u64..1000, shift in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = ModelShape::new(3, 6, 2, Head::Classification { classes: 2 }).unwrap();
        let params = ModelParams::init(shape, &mut rng);
        let rows = random_rows(&mut rng, 7, 3);
        let perm: Vec<usize> = (0..7).map(|i| (i + shift) % 7).collect();
        let x = Tensor::from_rows(&rows);
        let y = params.predict(&x).unwrap();
        let yp = params.predict(&x.select_rows(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(yp.row(i), y.row(p));
        }
    }

    #[test]
    fn referee_depends_only_on_relative_performance(
        seed in 0u64..1000,
        m in -1.0f64..1.0,
        benchmark in -1.0f64..1.0,
        c in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = MetaRefParams::init(RefereeShape::new(3, 5).unwrap(), &mut rng);
        let summary = [0.2, -0.4, 0.9];
        let a = w.factor(&summary, m - benchmark).unwrap();
        let b = w.factor(&summary, (m + c) - (benchmark + c)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }
}
