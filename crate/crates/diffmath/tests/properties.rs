use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reed_diffmath::nn::{Activation, Mlp, Mode};
use reed_diffmath::{Graph, ParamStore, Tensor};

fn naive_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, inner, cols) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = b.data()[j];
            for k in 0..inner {
                acc += x.get(i, k) * w.get(k, j);
            }
            out[i * cols + j] = acc;
        }
    }
    out
}

#[test]
fn dense_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::matrix(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::matrix(2, 2, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let b = Tensor::vector(vec![0.3, -0.7]);
    let expected = naive_affine(&x, &w, &b);
    let mut g = Graph::new();
    let (xn, wn, bn) = (g.constant(x), g.constant(w), g.constant(b));
    let y = g.dense(xn, wn, bn).unwrap();
    for (a, e) in g.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn forward_is_deterministic_and_batch_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", &[6, 64, 64, 1], Activation::LeakyRelu, &mut rng);
    let rows: Vec<Vec<f64>> = (0..37)
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let batch = Tensor::from_rows(&rows).unwrap();

    let run = |t: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = mlp.forward(&mut g, &store, x, Mode::Frozen).unwrap();
        g.value(y).data().to_vec()
    };
    let full = run(batch.clone());
    assert_eq!(full, run(batch));
    for (i, row) in rows.iter().enumerate() {
        let single = run(Tensor::from_rows(std::slice::from_ref(row)).unwrap());
        assert_eq!(single[0].to_bits(), full[i].to_bits(), "row {i}");
    }
}

proptest! {
    #[test]
    fn logsumexp_shift_invariance(
        xs in prop::collection::vec(-50.0f64..50.0, 1..8),
        c in -500.0f64..500.0,
    ) {
        let lse = |v: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(v));
            let l = g.logsumexp(x).unwrap();
            g.value(l).item()
        };
        let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let lhs = lse(shifted);
        let rhs = lse(xs) + c;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn cosine_is_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 3),
        b in prop::collection::vec(-10.0f64..10.0, 3),
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let mut g = Graph::new();
        let an = g.constant(Tensor::vector(a));
        let bn = g.constant(Tensor::vector(b));
        let c = g.cosine_similarity(an, bn).unwrap();
        let v = g.value(c).item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
    }
}
