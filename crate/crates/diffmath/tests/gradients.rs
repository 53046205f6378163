//! Analytic gradients against central finite differences (ε = 1e-5) on
//! 100 random instances per operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reed_diffmath::gradcheck::{check_inputs, check_params};
use reed_diffmath::nn::{Activation, Mlp, Mode};
use reed_diffmath::{Graph, ParamStore, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;

/// Uniform values kept away from the activation kinks at zero.
fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() > 1e-2 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn run<F>(name: &str, mut case: F)
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        worst = worst.max(case(&mut rng));
    }
    assert!(worst <= TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn dense() {
    run("dense", |rng| {
        let (b, i, o) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [
            random_tensor(rng, &[b, i]),
            random_tensor(rng, &[i, o]),
            random_tensor(rng, &[o]),
        ];
        check_inputs(&inputs, EPS, |g, n| {
            let y = g.dense(n[0], n[1], n[2])?;
            let y = g.square(y);
            Ok(g.sum(y))
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn activations() {
    for (name, act) in [
        ("relu", Activation::Relu),
        ("tanh", Activation::Tanh),
        ("leaky_relu", Activation::LeakyRelu),
    ] {
        run(name, |rng| {
            let x = random_tensor(rng, &[3, 4]);
            let w = random_tensor(rng, &[3, 4]);
            check_inputs(&[x, w], EPS, |g, n| {
                let a = act.apply(g, n[0]);
                let p = g.mul(a, n[1])?;
                Ok(g.sum(p))
            })
            .unwrap()
            .max_rel_error
        });
    }
}

#[test]
fn cosine_similarity() {
    run("cosine", |rng| {
        let d = rng.random_range(2..6);
        let inputs = [random_tensor(rng, &[d]), random_tensor(rng, &[d])];
        check_inputs(&inputs, EPS, |g, n| g.cosine_similarity(n[0], n[1]))
            .unwrap()
            .max_rel_error
    });
}

#[test]
fn rowwise_cosine_and_pairwise_similarity() {
    run("cosine matrix", |rng| {
        let (b, p) = (rng.random_range(1..5), rng.random_range(2..5));
        let inputs = [random_tensor(rng, &[b, p]), random_tensor(rng, &[b, p])];
        check_inputs(&inputs, EPS, |g, n| {
            let an = g.normalize_rows(n[0])?;
            let bn = g.normalize_rows(n[1])?;
            let sim = g.matmul_nt(an, bn)?;
            let sim = g.scale(sim, 3.0);
            let lse = g.logsumexp_rows(sim, None)?;
            let diag = g.cosine_rows(n[0], n[1])?;
            let both = g.sub(lse, diag)?;
            Ok(g.sum(both))
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn logsumexp() {
    run("logsumexp", |rng| {
        let n = rng.random_range(1..7);
        let inputs = [random_tensor(rng, &[n])];
        check_inputs(&inputs, EPS, |g, n| g.logsumexp(n[0])).unwrap().max_rel_error
    });
}

#[test]
fn masked_logsumexp_rows() {
    run("masked logsumexp", |rng| {
        let (r, c) = (rng.random_range(1..4), rng.random_range(2..5));
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.6)).collect();
        for row in 0..r {
            mask[row * c] = true;
        }
        let inputs = [random_tensor(rng, &[r, c])];
        check_inputs(&inputs, EPS, |g, n| {
            let l = g.logsumexp_rows(n[0], Some(mask.clone()))?;
            Ok(g.sum(l))
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn elementwise_and_structural_ops() {
    run("structural", |rng| {
        let b = rng.random_range(1..4);
        let inputs = [
            random_tensor(rng, &[b, 3]),
            random_tensor(rng, &[b, 2]),
            random_tensor(rng, &[b]),
        ];
        check_inputs(&inputs, EPS, |g, n| {
            let cat = g.concat_cols(&[n[0], n[1]])?;
            let left = g.slice_cols(cat, 1, 4)?;
            let sp = g.softplus(left);
            let ex = g.exp(n[1]);
            let mn = g.minimum(n[1], ex)?;
            let rs = g.row_sums(mn)?;
            let shifted = g.sub_column(sp, n[2])?;
            let sq = g.square(shifted);
            let picked = g.select_rows(sq, &[0, b - 1, 0])?;
            let sum_picked = g.sum(picked);
            let rd = g.row_dot(n[0], n[0])?;
            let pos = g.add_scalar(rd, 1.0);
            let lg = g.ln(pos);
            let total = g.add(lg, rs)?;
            let total = g.mean(total)?;
            let s = g.add(total, sum_picked)?;
            let c = g.clamp(s, -1e9, 1e9);
            Ok(g.scale(c, 0.5))
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn two_layer_mlp_parameters() {
    run("mlp", |rng| {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[3, 5, 2], Activation::Tanh, rng);
        let x = random_tensor(rng, &[4, 3]);
        let target = random_tensor(rng, &[4, 2]);
        check_params(&mut store, EPS, |g, s| {
            let xn = g.constant(x.clone());
            let y = mlp.forward(g, s, xn, Mode::Train)?;
            let t = g.constant(target.clone());
            let d = g.sub(y, t)?;
            let sq = g.square(d);
            g.mean(sq)
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn stop_gradient_yields_exact_zero_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "f", &[3, 4, 2], Activation::Relu, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&mut rng, &[5, 3]));
    let y = mlp.forward(&mut g, &store, x, Mode::Train).unwrap();
    let sg = g.stop_gradient(y);
    let other = g.variable(random_tensor(&mut rng, &[5, 2]));
    let c = g.cosine_rows(other, sg).unwrap();
    let loss = g.mean(c).unwrap();
    let grads = g.backward(loss).unwrap();
    for id in mlp.params() {
        assert!(grads.param(&store, id).is_none());
    }
    assert!(grads.wrt(other).is_some());
}
