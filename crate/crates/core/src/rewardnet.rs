//! Preference-learned reward model: state-action fusion networks, the
//! ensemble around them, Bradley-Terry preference probabilities and the
//! cross-entropy objective.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reed_diffmath::nn::{Activation, Linear, Mlp, Mode};
use reed_diffmath::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, Graph, NodeId, ParamStore, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::buffer::Segment;
use crate::error::{CoreError, Result};

/// Bound applied to preference probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardArch {
    /// Separate state and action encoders fused by a trunk.
    Saf,
    /// Raw state-action concatenation fed to the trunk.
    Legacy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardNetConfig {
    pub arch: RewardArch,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub state_embed: usize,
    pub action_embed: usize,
    pub lr: f64,
}

impl RewardNetConfig {
    /// Embedding sizes scale with the input sizes: twice the state and
    /// action dimensions.
    pub fn for_dims(state_dim: usize, action_dim: usize) -> Self {
        Self {
            arch: RewardArch::Saf,
            hidden: 256,
            hidden_layers: 3,
            activation: Activation::LeakyRelu,
            state_embed: 2 * state_dim,
            action_embed: 2 * action_dim,
            lr: 3e-4,
        }
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RewardForward {
    /// `z^s`, absent for the legacy network.
    pub z_s: Option<NodeId>,
    /// Fused representation feeding the reward head, `[B × hidden]`.
    pub z_sa: NodeId,
    /// `[B × 1]`, inside (−1, 1).
    pub reward: NodeId,
}

/// One reward network `r̂_ψ(s, a)`. All parameters live in `store`; the
/// auxiliary heads of the same member train this very store.
#[derive(Clone, Debug)]
pub struct SafNetwork {
    pub config: RewardNetConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub store: ParamStore,
    f_s: Option<Mlp>,
    f_a: Option<Mlp>,
    trunk: Mlp,
    head: Linear,
}

impl SafNetwork {
    pub fn new(config: RewardNetConfig, state_dim: usize, action_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let act = config.activation;
        let h = config.hidden;
        let (f_s, f_a, trunk_in) = match config.arch {
            RewardArch::Saf => (
                Some(Mlp::new(&mut store, "f_s", &[state_dim, h, config.state_embed], act, &mut rng)),
                Some(Mlp::new(&mut store, "f_a", &[action_dim, h, config.action_embed], act, &mut rng)),
                config.state_embed + config.action_embed,
            ),
            RewardArch::Legacy => (None, None, state_dim + action_dim),
        };
        let mut dims = vec![trunk_in];
        dims.extend(std::iter::repeat_n(h, config.hidden_layers));
        let trunk = Mlp::new(&mut store, "f_sa", &dims, act, &mut rng);
        let head = Linear::new(&mut store, "head", h, 1, &mut rng);
        Self {
            config,
            state_dim,
            action_dim,
            store,
            f_s,
            f_a,
            trunk,
            head,
        }
    }

    pub fn arch(&self) -> RewardArch {
        self.config.arch
    }

    /// Width of `z^s`.
    pub fn state_embed_dim(&self) -> usize {
        self.config.state_embed
    }

    /// Width of `z^{sa}`.
    pub fn fused_dim(&self) -> usize {
        self.config.hidden
    }

    /// `f_s(s)`; fails for the legacy network, which has no state encoder.
    pub fn encode_state(&self, g: &mut Graph, states: NodeId, mode: Mode) -> Result<NodeId> {
        let f_s = self.f_s.as_ref().ok_or_else(|| {
            CoreError::InvalidConfig("the legacy reward network has no state encoder".into())
        })?;
        Ok(f_s.forward(g, &self.store, states, mode)?)
    }

    pub fn forward(&self, g: &mut Graph, states: NodeId, actions: NodeId, mode: Mode) -> Result<RewardForward> {
        self.forward_with(&self.store, g, states, actions, mode)
    }

    /// Forward pass reading parameters from `store`, which must share this
    /// network's layout (e.g. a perturbed copy).
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        states: NodeId,
        actions: NodeId,
        mode: Mode,
    ) -> Result<RewardForward> {
        let (z_s, trunk_in) = match (&self.f_s, &self.f_a) {
            (Some(f_s), Some(f_a)) => {
                let z_s = f_s.forward(g, store, states, mode)?;
                let z_a = f_a.forward(g, store, actions, mode)?;
                (Some(z_s), g.concat_cols(&[z_s, z_a])?)
            }
            _ => (None, g.concat_cols(&[states, actions])?),
        };
        let pre = self.trunk.forward(g, store, trunk_in, mode)?;
        let z_sa = self.config.activation.apply(g, pre);
        let logits = self.head.forward(g, store, z_sa, mode)?;
        let reward = g.tanh(logits);
        Ok(RewardForward { z_s, z_sa, reward })
    }

    /// Rewards for a batch of `(s, a)` rows.
    pub fn predict_batch(&self, states: &[&[f64]], actions: &[&[f64]]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(states)?);
        let a = g.constant(Tensor::from_rows(actions)?);
        let out = self.forward(&mut g, s, a, Mode::Frozen)?;
        Ok(g.value(out.reward).data().to_vec())
    }

    pub fn predict_reward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        if state.len() != self.state_dim {
            return Err(CoreError::DimMismatch {
                what: "state",
                expected: self.state_dim,
                actual: state.len(),
            });
        }
        if action.len() != self.action_dim {
            return Err(CoreError::DimMismatch {
                what: "action",
                expected: self.action_dim,
                actual: action.len(),
            });
        }
        Ok(self.predict_batch(&[state], &[action])?[0])
    }

    /// `[σ¹ return, σ² return]` logits for each pair, as a `[P × 2]` node.
    fn pair_returns(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        pairs: &[(&Segment, &Segment)],
        mode: Mode,
    ) -> Result<NodeId> {
        let len = pairs[0].0.len();
        let mut states = Vec::with_capacity(2 * pairs.len() * len);
        let mut actions = Vec::with_capacity(states.capacity());
        for (s1, s2) in pairs {
            if s1.len() != len || s2.len() != len {
                return Err(CoreError::DimMismatch {
                    what: "segment length",
                    expected: len,
                    actual: if s1.len() != len { s1.len() } else { s2.len() },
                });
            }
            for seg in [s1, s2] {
                states.extend(seg.states());
                actions.extend(seg.actions());
            }
        }
        let s = g.constant(Tensor::from_rows(&states)?);
        let a = g.constant(Tensor::from_rows(&actions)?);
        let r = self.forward_with(store, g, s, a, mode)?.reward;
        let per_segment = g.reshape(r, vec![2 * pairs.len(), len])?;
        let sums = g.row_sums(per_segment)?;
        Ok(g.reshape(sums, vec![pairs.len(), 2])?)
    }

    /// `P[σ¹ ≻ σ²]` for each pair.
    pub fn preference_probabilities(&self, pairs: &[(&Segment, &Segment)]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let returns = self.pair_returns(&self.store, &mut g, pairs, Mode::Frozen)?;
        let rv = g.value(returns);
        Ok((0..pairs.len())
            .map(|i| bradley_terry(rv.get(i, 0), rv.get(i, 1)))
            .collect())
    }

    pub fn preference_probability(&self, s1: &Segment, s2: &Segment) -> Result<f64> {
        Ok(self.preference_probabilities(&[(s1, s2)])?[0])
    }

    /// Graph node for the mean cross-entropy over `batch`.
    pub fn bce_node(&self, g: &mut Graph, batch: &[&PreferenceTriple], mode: Mode) -> Result<NodeId> {
        self.bce_node_with(&self.store, g, batch, mode)
    }

    pub fn bce_node_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        batch: &[&PreferenceTriple],
        mode: Mode,
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        let pairs: Vec<_> = batch.iter().map(|t| (&t.sigma1, &t.sigma2)).collect();
        let returns = self.pair_returns(store, g, &pairs, mode)?;
        bce_from_returns(g, returns, batch.iter().map(|t| t.y_p))
    }

    pub fn bce_loss(&self, batch: &[&PreferenceTriple]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.bce_node(&mut g, batch, Mode::Frozen)?;
        Ok(g.value(loss).item())
    }
}

/// `exp(R₁) / (exp(R₁) + exp(R₂))`, written as a logistic of the gap
/// so that it never overflows and ties give exactly one half.
pub fn bradley_terry(r1: f64, r2: f64) -> f64 {
    let d = r2 - r1;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// Cross-entropy from a `[P × 2]` node of segment returns.
///
/// Column 0 of `returns` holds σ¹'s return, so `ln P[σ¹≻σ²]` is weighted by
/// `y_p[1]` and `ln P[σ²≻σ¹]` by `y_p[0]`.
pub fn bce_from_returns(
    g: &mut Graph,
    returns: NodeId,
    labels: impl Iterator<Item = [f64; 2]>,
) -> Result<NodeId> {
    let n = g.value(returns).rows();
    let lse = g.logsumexp_rows(returns, None)?;
    let log_p = g.sub_column(returns, lse)?;
    let p = g.exp(log_p);
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.ln(p);
    let weights: Vec<f64> = labels.flat_map(|y| [y[1], y[0]]).collect();
    let w = g.constant(Tensor::matrix(n, 2, weights)?);
    let weighted = g.mul(log_p, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Soft label over the pair: `y_p[1]` is the weight on σ¹ being preferred
/// and `y_p[0]` the weight on σ².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub sigma1: Segment,
    pub sigma2: Segment,
    pub y_p: [f64; 2],
}

pub const PREFER_FIRST: [f64; 2] = [0.0, 1.0];
pub const PREFER_SECOND: [f64; 2] = [1.0, 0.0];
pub const EQUAL: [f64; 2] = [0.5, 0.5];

impl PreferenceTriple {
    pub fn is_hard(&self) -> bool {
        self.y_p[0] != self.y_p[1]
    }

    /// The same comparison with σ¹ and σ² exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            sigma1: self.sigma2.clone(),
            sigma2: self.sigma1.clone(),
            y_p: [self.y_p[1], self.y_p[0]],
        }
    }
}

/// Append-only `D_pref`.
#[derive(Clone, Debug, Default)]
pub struct PreferenceDataset {
    triples: Vec<PreferenceTriple>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: PreferenceTriple) {
        self.triples.push(t);
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[PreferenceTriple] {
        &self.triples
    }

    /// One JSON object per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for t in &self.triples {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let mut triples = Vec::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                triples.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { triples })
    }
}

#[derive(Clone, Debug)]
pub struct RewardMember {
    pub net: SafNetwork,
    pub opt: AdamState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    /// Mean cross-entropy over the whole dataset after training.
    pub loss: f64,
    /// Fraction of hard-labelled triples on the correct side of 0.5.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop a member early once its dataset accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

pub const ENSEMBLE_SIZE: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EnsembleManifest {
    config: RewardNetConfig,
    state_dim: usize,
    action_dim: usize,
    members: Vec<String>,
}

/// Three independently initialised reward networks.
#[derive(Clone, Debug)]
pub struct RewardEnsemble {
    pub members: Vec<RewardMember>,
    shuffle_rng: ChaCha8Rng,
    updates: u64,
}

impl RewardEnsemble {
    pub fn new(config: RewardNetConfig, state_dim: usize, action_dim: usize, seed: u64) -> Self {
        let members = (0..ENSEMBLE_SIZE as u64)
            .map(|i| {
                let net = SafNetwork::new(
                    config.clone(),
                    state_dim,
                    action_dim,
                    seed.wrapping_mul(0x9E37_79B9).wrapping_add(i + 1),
                );
                let opt = AdamState::new(AdamConfig::with_lr(config.lr), &net.store);
                RewardMember { net, opt }
            })
            .collect();
        Self {
            members,
            shuffle_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0FD0),
            updates: 0,
        }
    }

    pub fn config(&self) -> &RewardNetConfig {
        &self.members[0].net.config
    }

    pub fn state_dim(&self) -> usize {
        self.members[0].net.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.members[0].net.action_dim
    }

    /// Number of completed preference-training calls.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Arithmetic mean of the member predictions, per row.
    pub fn mean_rewards(&self, states: &[&[f64]], actions: &[&[f64]]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; states.len()];
        for m in &self.members {
            for (a, r) in acc.iter_mut().zip(m.net.predict_batch(states, actions)?) {
                *a += r;
            }
        }
        let k = self.members.len() as f64;
        Ok(acc.into_iter().map(|a| a / k).collect())
    }

    pub fn ensemble_mean_reward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for m in &self.members {
            total += m.net.predict_reward(state, action)?;
        }
        Ok(total / self.members.len() as f64)
    }

    /// Per-member `P[σ¹≻σ²]` for every pair: `result[member][pair]`.
    pub fn member_probabilities(&self, pairs: &[(&Segment, &Segment)]) -> Result<Vec<Vec<f64>>> {
        self.members
            .iter()
            .map(|m| m.net.preference_probabilities(pairs))
            .collect()
    }

    /// Trains every member on `dataset` with its own shuffled batch order.
    pub fn train_on_preferences(
        &mut self,
        dataset: &PreferenceDataset,
        settings: &TrainSettings,
    ) -> Result<Vec<MemberReport>> {
        if dataset.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        if settings.batch_size == 0 {
            return Err(CoreError::InvalidConfig("preference batch size must be positive".into()));
        }
        let all: Vec<&PreferenceTriple> = dataset.triples().iter().collect();
        let mut reports = Vec::with_capacity(self.members.len());
        for member in &mut self.members {
            let mut order: Vec<usize> = (0..all.len()).collect();
            for _ in 0..settings.epochs {
                order.shuffle(&mut self.shuffle_rng);
                for chunk in order.chunks(settings.batch_size) {
                    let batch: Vec<&PreferenceTriple> = chunk.iter().map(|&i| all[i]).collect();
                    let mut g = Graph::new();
                    let loss = member.net.bce_node(&mut g, &batch, Mode::Train)?;
                    let value = g.value(loss).item();
                    if !value.is_finite() {
                        return Err(CoreError::NonFinite {
                            what: "preference loss",
                            value,
                            update: self.updates,
                        });
                    }
                    let grads = g.backward(loss)?;
                    member.opt.step(&mut member.net.store, &grads);
                }
                if let Some(target) = settings.stop_at_accuracy {
                    if evaluate(&member.net, &all)?.accuracy >= target {
                        break;
                    }
                }
            }
            reports.push(evaluate(&member.net, &all)?);
        }
        self.updates += 1;
        Ok(reports)
    }

    /// Writes `member_<i>.bin` / `member_<i>.json` plus `ensemble.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i}");
            save_checkpoint(
                &m.net.store,
                &dir.join(format!("{name}.bin")),
                &dir.join(format!("{name}.json")),
            )?;
            names.push(name);
        }
        let manifest = EnsembleManifest {
            config: self.config().clone(),
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            members: names,
        };
        fs::write(dir.join("ensemble.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: EnsembleManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("ensemble.json"))?)?;
        if manifest.members.len() != ENSEMBLE_SIZE {
            return Err(CoreError::DimMismatch {
                what: "ensemble members",
                expected: ENSEMBLE_SIZE,
                actual: manifest.members.len(),
            });
        }
        let mut ens = Self::new(manifest.config, manifest.state_dim, manifest.action_dim, 0);
        for (m, name) in ens.members.iter_mut().zip(&manifest.members) {
            let records = load_checkpoint(&dir.join(format!("{name}.bin")))?;
            m.net.store.load_records(records)?;
        }
        Ok(ens)
    }

    /// Bitwise equality of every member's parameters.
    pub fn same_parameters(&self, other: &RewardEnsemble) -> bool {
        self.members.len() == other.members.len()
            && self
                .members
                .iter()
                .zip(&other.members)
                .all(|(a, b)| a.net.store.same_values(&b.net.store))
    }
}

fn evaluate(net: &SafNetwork, triples: &[&PreferenceTriple]) -> Result<MemberReport> {
    let loss = net.bce_loss(triples)?;
    let pairs: Vec<_> = triples.iter().map(|t| (&t.sigma1, &t.sigma2)).collect();
    let probs = net.preference_probabilities(&pairs)?;
    let (mut hard, mut correct) = (0usize, 0usize);
    for (t, p) in triples.iter().zip(probs) {
        if t.is_hard() {
            hard += 1;
            let first_preferred = t.y_p[1] > t.y_p[0];
            if (p > 0.5) == first_preferred && p != 0.5 {
                correct += 1;
            }
        }
    }
    let accuracy = if hard == 0 { 1.0 } else { correct as f64 / hard as f64 };
    Ok(MemberReport { loss, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::Transition;

    fn small_config() -> RewardNetConfig {
        RewardNetConfig {
            hidden: 8,
            hidden_layers: 2,
            ..RewardNetConfig::for_dims(2, 1)
        }
    }

    pub(crate) fn segment(states: &[[f64; 2]]) -> Segment {
        Segment {
            start: 0,
            transitions: states
                .iter()
                .enumerate()
                .map(|(i, s)| Transition {
                    state: s.to_vec(),
                    action: vec![0.1],
                    next_state: s.to_vec(),
                    reward_true: 0.0,
                    reward_hat: 0.0,
                    step_index: i,
                    episode_id: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn bradley_terry_closed_form() {
        assert!((bradley_terry(1.0, 0.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(bradley_terry(0.3, 0.3), 0.5);
        assert!((bradley_terry(800.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_segments_are_even() {
        let net = SafNetwork::new(small_config(), 2, 1, 3);
        let s = segment(&[[0.1, 0.2], [0.3, -0.4]]);
        assert_eq!(net.preference_probability(&s, &s).unwrap(), 0.5);
    }

    #[test]
    fn zero_input_gives_head_bias_through_tanh() {
        // Zeroing every weight makes each layer output its bias; tracing
        // the biases by hand gives the prediction.
        let mut net = SafNetwork::new(small_config(), 2, 1, 11);
        let ids: Vec<_> = net.store.ids().collect();
        for id in ids {
            if net.store.name(id).ends_with(".weight") {
                net.store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let head_bias = net
            .store
            .iter()
            .find(|(_, n, _)| *n == "head.bias")
            .map(|(_, _, t)| t.data()[0])
            .unwrap();
        let r = net.predict_reward(&[0.0, 0.0], &[0.0]).unwrap();
        assert_eq!(r, head_bias.tanh());
    }

    #[test]
    fn legacy_network_has_no_state_encoder() {
        let cfg = RewardNetConfig {
            arch: RewardArch::Legacy,
            ..small_config()
        };
        let net = SafNetwork::new(cfg, 2, 1, 0);
        assert!(net.store.iter().all(|(_, n, _)| !n.starts_with("f_s.")));
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 2]));
        assert!(net.encode_state(&mut g, s, Mode::Frozen).is_err());
        let r = net.predict_reward(&[0.5, 0.5], &[0.0]).unwrap();
        assert!(r.abs() < 1.0);
    }

    #[test]
    fn members_do_not_share_parameters() {
        let ens = RewardEnsemble::new(small_config(), 2, 1, 0);
        assert!(!ens.members[0].net.store.same_values(&ens.members[1].net.store));
        assert!(!ens.members[1].net.store.same_values(&ens.members[2].net.store));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut ens = RewardEnsemble::new(small_config(), 2, 1, 0);
        let settings = TrainSettings {
            epochs: 1,
            batch_size: 5,
            stop_at_accuracy: None,
        };
        assert!(matches!(
            ens.train_on_preferences(&PreferenceDataset::new(), &settings),
            Err(CoreError::EmptyDataset)
        ));
    }
}
