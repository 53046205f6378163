use serde::{Deserialize, Serialize};

use crate::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one [`ParamStore`]. No weight decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| {
            s.iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter that received a
    /// gradient; parameters absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2_sqrt = (1.0 - beta2.powi(self.step as i32)).sqrt();
        let step_size = lr / bias1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(store, id) else {
                continue;
            };
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let g = g.data().to_vec();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let denom = v[k].sqrt() / bias2_sqrt + eps;
                p[k] -= step_size * m[k] / denom;
            }
        }
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(store, id) else {
                continue;
            };
            let g = g.data().to_vec();
            for (p, gk) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                *p -= self.lr * gk;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { lr: f64 },
    Sgd { lr: f64 },
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Adam { lr } => Optimizer::Adam(AdamState::new(AdamConfig::with_lr(lr), store)),
            OptimizerKind::Sgd { lr } => Optimizer::Sgd(Sgd { lr }),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        match self {
            Optimizer::Adam(state) => state.step(store, grads),
            Optimizer::Sgd(sgd) => sgd.step(store, grads),
        }
    }
}

/// Rescales all parameter gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let total = grads
        .all_params_mut()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.all_params_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, ParamId};

    fn quadratic_grads(store: &ParamStore, w: ParamId) -> Gradients {
        let mut g = Graph::new();
        let wn = g.param(store, w);
        let sq = g.square(wn);
        let loss = g.sum(sq);
        g.backward(loss).unwrap()
    }

    #[test]
    fn sgd_on_square_from_one() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0]));
        let sgd = Sgd { lr: 0.1 };
        for _ in 0..2 {
            let grads = quadratic_grads(&store, w);
            sgd.step(&mut store, &grads);
        }
        assert!((store.get(w).item() - 0.64).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.0, 3.0]));
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let z = g.scale(wn, 0.0);
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        Sgd { lr: 0.5 }.step(&mut store, &grads);
        assert_eq!(store.get(w).data(), &[0.0, 3.0]);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps) ≈ lr.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![2.0]));
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let loss = g.sum(wn); // gradient 1
        let grads = g.backward(loss).unwrap();
        let lr = 0.01;
        let mut adam = AdamState::new(AdamConfig::with_lr(lr), &store);
        adam.step(&mut store, &grads);
        let expected = 2.0 - lr * 1.0 / (1.0 + 1e-8);
        assert!((store.get(w).item() - expected).abs() < 1e-15);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![3.0, 4.0]));
        let mut grads = {
            let mut g = Graph::new();
            let wn = g.param(&store, w);
            let sq = g.square(wn);
            let loss = g.sum(sq);
            g.backward(loss).unwrap()
        };
        let before = clip_grad_norm(&mut grads, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((grads.param(&store, w).unwrap().l2_norm() - 1.0).abs() < 1e-12);
    }
}
