//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use crate::{Graph, NodeId, ParamStore, Result, Tensor};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if rel > self.max_rel_error || !rel.is_finite() {
            self.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

/// Absolute scale under which errors are judged absolutely rather than
/// relatively, so near-zero gradients do not amplify rounding noise.
pub const REL_FLOOR: f64 = 1e-3;

/// Checks the gradient of a scalar function of several input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let nodes: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &nodes)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let nodes: Vec<_> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &nodes)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, node) in nodes.iter().enumerate() {
        let analytic = grads
            .wrt(*node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            report.record(analytic.data()[k], (plus - minus) / (2.0 * eps), REL_FLOOR);
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar function with respect to every value in
/// `store`.
pub fn check_params<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = store
        .ids()
        .map(|id| {
            grads
                .param(store, id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
        })
        .collect();

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let plus = {
                let mut g = Graph::new();
                let l = build(&mut g, store)?;
                g.value(l).item()
            };
            store.get_mut(id).data_mut()[k] = orig - eps;
            let minus = {
                let mut g = Graph::new();
                let l = build(&mut g, store)?;
                g.value(l).item()
            };
            store.get_mut(id).data_mut()[k] = orig;
            report.record(analytic[i].data()[k], (plus - minus) / (2.0 * eps), REL_FLOOR);
        }
    }
    Ok(report)
}
