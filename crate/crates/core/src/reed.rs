//! Self-predictive auxiliary training of the reward encoders.
//!
//! Each ensemble member owns a set of heads: a one-layer dynamics model
//! `g_d`, a projection bottleneck `h_pro` and a predictor `h_pre`. The
//! member's encoders are trained in place, so every update is visible to
//! its reward predictions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reed_diffmath::nn::{Linear, Mode};
use reed_diffmath::{Graph, NodeId, Optimizer, OptimizerKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::error::{CoreError, Result};
use crate::rewardnet::{RewardArch, RewardEnsemble, SafNetwork};

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReedMode {
    None,
    Distill,
    Contrast,
}

impl std::str::FromStr for ReedMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "distill" => Ok(Self::Distill),
            "contrast" => Ok(Self::Contrast),
            other => Err(CoreError::InvalidConfig(format!("unknown REED mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReedConfig {
    pub mode: ReedMode,
    /// Prediction horizon.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub optimizer: OptimizerKind,
    /// Width of the projection bottleneck; must be below the state
    /// embedding width.
    pub projection_dim: usize,
    /// Mean pairwise |cos| among targets above which an epoch counts as
    /// collapsed.
    pub collapse_threshold: f64,
}

impl ReedConfig {
    pub fn new(mode: ReedMode, projection_dim: usize) -> Self {
        Self {
            mode,
            k: 1,
            epochs: 20,
            batch_size: 128,
            temperature: 0.005,
            optimizer: OptimizerKind::Adam { lr: 1e-4 },
            projection_dim,
            collapse_threshold: 0.999,
        }
    }
}

/// Per-member auxiliary heads plus the optimizer state that trains them
/// together with the member's encoders.
#[derive(Clone, Debug)]
pub struct SprHeads {
    pub store: ParamStore,
    pub g_d: Linear,
    pub h_pro: Linear,
    pub h_pre: Linear,
    theta_opt: Optimizer,
    psi_opt: Optimizer,
}

impl SprHeads {
    pub fn new(net: &SafNetwork, config: &ReedConfig, seed: u64) -> Result<Self> {
        if net.arch() != RewardArch::Saf {
            return Err(CoreError::InvalidConfig(
                "auxiliary heads need the state-action fusion reward network".into(),
            ));
        }
        let z_s = net.state_embed_dim();
        if config.projection_dim == 0 || config.projection_dim >= z_s {
            return Err(CoreError::InvalidConfig(format!(
                "projection width {} must be in 1..{z_s}",
                config.projection_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g_d = Linear::new(&mut store, "g_d", net.fused_dim(), z_s, &mut rng);
        let h_pro = Linear::new(&mut store, "h_pro", z_s, config.projection_dim, &mut rng);
        let h_pre = Linear::new(
            &mut store,
            "h_pre",
            config.projection_dim,
            config.projection_dim,
            &mut rng,
        );
        let theta_opt = Optimizer::new(config.optimizer, &store);
        let psi_opt = Optimizer::new(config.optimizer, &net.store);
        Ok(Self {
            store,
            g_d,
            h_pro,
            h_pre,
            theta_opt,
            psi_opt,
        })
    }

    /// One set of heads per ensemble member.
    pub fn for_ensemble(ensemble: &RewardEnsemble, config: &ReedConfig, seed: u64) -> Result<Vec<Self>> {
        ensemble
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| Self::new(&m.net, config, seed.wrapping_add(1000 + i as u64)))
            .collect()
    }
}

/// Aligned `(s_t, a_t, s_{t+k})` rows from one episode each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SprBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl SprBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Logical positions `i` whose `k`-step target stays in one episode.
pub fn spr_positions(buffer: &ReplayBuffer, k: usize) -> Vec<usize> {
    if k <= 1 {
        return (0..buffer.len()).collect();
    }
    (0..buffer.len())
        .filter(|&i| buffer.is_contiguous(i, k))
        .collect()
}

pub fn spr_batch(buffer: &ReplayBuffer, positions: &[usize], k: usize) -> SprBatch {
    let k = k.max(1);
    let mut batch = SprBatch::default();
    for &i in positions {
        let t = buffer.get(i);
        batch.states.push(t.state.clone());
        batch.actions.push(t.action.clone());
        batch.targets.push(buffer.get(i + k - 1).next_state.clone());
    }
    batch
}

/// `(ŷ, y)`: the predicted projection and the stop-gradient target
/// projection, both `[B × P]`.
pub fn spr_forward(
    g: &mut Graph,
    net: &SafNetwork,
    heads: &SprHeads,
    batch: &SprBatch,
    mode: Mode,
) -> Result<(NodeId, NodeId)> {
    let s = g.constant(Tensor::from_rows(&batch.states)?);
    let a = g.constant(Tensor::from_rows(&batch.actions)?);
    let s_next = g.constant(Tensor::from_rows(&batch.targets)?);
    let z_sa = net.forward(g, s, a, mode)?.z_sa;
    let z_hat = heads.g_d.forward(g, &heads.store, z_sa, mode)?;
    let p_hat = heads.h_pro.forward(g, &heads.store, z_hat, mode)?;
    let y_hat = heads.h_pre.forward(g, &heads.store, p_hat, mode)?;
    let z_next = net.encode_state(g, s_next, mode)?;
    let y = heads.h_pro.forward(g, &heads.store, z_next, mode)?;
    let y = g.stop_gradient(y);
    Ok((y_hat, y))
}

fn row_norm(t: &Tensor, r: usize) -> f64 {
    t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rows where both `a` and `b` have usable norms.
fn healthy_rows(g: &Graph, a: NodeId, b: NodeId) -> (Vec<usize>, Vec<usize>) {
    let (av, bv) = (g.value(a), g.value(b));
    (0..av.rows()).partition(|&r| row_norm(av, r) >= DEGENERATE_NORM && row_norm(bv, r) >= DEGENERATE_NORM)
}

#[derive(Clone, Debug)]
pub struct LossNode {
    /// `None` when every row was degenerate.
    pub loss: Option<NodeId>,
    /// Rows dropped for near-zero norm.
    pub excluded: Vec<usize>,
}

/// Mean over rows of `−cos(ŷ, y)`; degenerate rows are dropped and
/// reported.
pub fn distillation_loss(g: &mut Graph, y_hat: NodeId, y: NodeId) -> Result<LossNode> {
    let (keep, excluded) = healthy_rows(g, y_hat, y);
    if keep.is_empty() {
        return Ok(LossNode { loss: None, excluded });
    }
    let a = g.select_rows(y_hat, &keep)?;
    let b = g.select_rows(y, &keep)?;
    let cos = g.cosine_rows(a, b)?;
    let mean = g.mean(cos)?;
    Ok(LossNode {
        loss: Some(g.neg(mean)),
        excluded,
    })
}

/// NT-Xent with anchors `ŷ_t` against the targets `y_j`. The positive is
/// always a candidate; other rows count as negatives only when their
/// underlying next state differs from the anchor's.
pub fn contrastive_loss(
    g: &mut Graph,
    y_hat: NodeId,
    y: NodeId,
    temperature: f64,
    next_states: &[Vec<f64>],
) -> Result<LossNode> {
    let (keep, excluded) = healthy_rows(g, y_hat, y);
    if keep.is_empty() {
        return Ok(LossNode { loss: None, excluded });
    }
    let a = g.select_rows(y_hat, &keep)?;
    let b = g.select_rows(y, &keep)?;
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let sims = g.matmul_nt(an, bn)?;
    let logits = g.scale(sims, 1.0 / temperature);
    let n = keep.len();
    let mut mask = Vec::with_capacity(n * n);
    for &i in &keep {
        for &j in &keep {
            mask.push(i == j || next_states[i] != next_states[j]);
        }
    }
    let lse = g.logsumexp_rows(logits, Some(mask))?;
    let pos = g.row_dot(an, bn)?;
    let pos = g.scale(pos, 1.0 / temperature);
    let per_anchor = g.sub(lse, pos)?;
    Ok(LossNode {
        loss: Some(g.mean(per_anchor)?),
        excluded,
    })
}

/// Mean over distinct row pairs of |cos| between target projections.
fn mean_pairwise_abs_cos(t: &Tensor) -> Option<f64> {
    let rows: Vec<usize> = (0..t.rows()).filter(|&r| row_norm(t, r) >= DEGENERATE_NORM).collect();
    if rows.len() < 2 {
        return None;
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (x, &i) in rows.iter().enumerate() {
        for &j in &rows[x + 1..] {
            let dot: f64 = t.row(i).iter().zip(t.row(j)).map(|(p, q)| p * q).sum();
            total += (dot / (row_norm(t, i) * row_norm(t, j))).abs();
            count += 1;
        }
    }
    Some(total / count as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReedReport {
    /// Mean auxiliary loss per member over the final epoch.
    pub member_losses: Vec<f64>,
    /// Mean loss per epoch, averaged over members.
    pub epoch_losses: Vec<f64>,
    /// Rows dropped for degenerate norms, summed over everything.
    pub excluded_rows: usize,
    /// Highest per-epoch mean pairwise |cos| among targets.
    pub max_target_similarity: f64,
    pub collapsed: bool,
}

/// Runs `config.epochs` passes over every valid buffer position for each
/// member, updating the member's encoders and its heads jointly.
pub fn train_reed_epoch(
    ensemble: &mut RewardEnsemble,
    heads: &mut [SprHeads],
    buffer: &ReplayBuffer,
    config: &ReedConfig,
    seed: u64,
) -> Result<ReedReport> {
    let mut report = ReedReport::default();
    if config.mode == ReedMode::None {
        return Ok(report);
    }
    if heads.len() != ensemble.members.len() {
        return Err(CoreError::DimMismatch {
            what: "auxiliary head sets",
            expected: ensemble.members.len(),
            actual: heads.len(),
        });
    }
    let positions = spr_positions(buffer, config.k);
    if positions.is_empty() {
        return Err(CoreError::NoFullSegment { len: config.k });
    }
    let batch_size = config.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_sums = vec![0.0; config.epochs];
    for (member, head) in ensemble.members.iter_mut().zip(heads.iter_mut()) {
        let mut order = positions.clone();
        let mut last = 0.0;
        for (epoch, epoch_sum) in epoch_sums.iter_mut().enumerate() {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut batches) = (0.0, 0usize);
            let (mut sim_sum, mut sim_batches) = (0.0, 0usize);
            for chunk in order.chunks(batch_size) {
                let batch = spr_batch(buffer, chunk, config.k);
                let mut g = Graph::new();
                let (y_hat, y) = spr_forward(&mut g, &member.net, head, &batch, Mode::Train)?;
                if let Some(s) = mean_pairwise_abs_cos(g.value(y)) {
                    sim_sum += s;
                    sim_batches += 1;
                }
                let out = match config.mode {
                    ReedMode::Distill => distillation_loss(&mut g, y_hat, y)?,
                    _ => contrastive_loss(&mut g, y_hat, y, config.temperature, &batch.targets)?,
                };
                report.excluded_rows += out.excluded.len();
                let Some(loss) = out.loss else { continue };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(CoreError::NonFinite {
                        what: "auxiliary loss",
                        value,
                        update: epoch as u64,
                    });
                }
                let grads = g.backward(loss)?;
                head.psi_opt.step(&mut member.net.store, &grads);
                head.theta_opt.step(&mut head.store, &grads);
                loss_sum += value;
                batches += 1;
            }
            last = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
            *epoch_sum += last;
            if sim_batches > 0 {
                let sim = sim_sum / sim_batches as f64;
                report.max_target_similarity = report.max_target_similarity.max(sim);
                if config.mode == ReedMode::Distill && sim > config.collapse_threshold {
                    report.collapsed = true;
                }
            }
        }
        report.member_losses.push(last);
    }
    let members = ensemble.members.len() as f64;
    report.epoch_losses = epoch_sums.into_iter().map(|s| s / members).collect();
    if report.excluded_rows > 0 {
        report.collapsed = true;
    }
    Ok(report)
}
