//! Soft actor-critic with a tanh-squashed Gaussian policy, plus the
//! k-NN state-entropy bonus used for unsupervised pretraining and buffer
//! reward relabelling.

use std::f64::consts::{LN_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use reed_diffmath::nn::{Activation, Mlp, Mode};
use reed_diffmath::{save_checkpoint, AdamConfig, AdamState, Graph, NodeId, ParamId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::buffer::{ReplayBuffer, Transition};
use crate::envsim::{Env, EnvSpec};
use crate::error::{CoreError, Result};
use crate::rewardnet::RewardEnsemble;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Temperature {
    Learned { initial: f64 },
    Fixed { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    /// EMA rate of the target critics.
    pub tau: f64,
    /// Critic steps between target updates.
    pub target_update_every: u64,
    pub temperature: Temperature,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            hidden_layers: 2,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            alpha_lr: 1e-4,
            batch_size: 256,
            gamma: 0.99,
            tau: 5e-3,
            target_update_every: 2,
            temperature: Temperature::Learned { initial: 0.1 },
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    /// Temperature after the update.
    pub temperature: f64,
    /// Mean `−log π(a|s)` over the batch.
    pub entropy: f64,
}

/// Training rows with actions already normalised to `[-1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct SacBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
    pub dones: Vec<bool>,
}

impl SacBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Replacement for the policy when forming critic targets.
pub type NextActionFn<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

#[derive(Clone, Debug)]
pub struct SacAgent {
    pub config: SacConfig,
    state_dim: usize,
    action_dim: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    target_entropy: f64,
    actor: Mlp,
    actor_store: ParamStore,
    actor_opt: AdamState,
    q1: Mlp,
    q2: Mlp,
    critic_store: ParamStore,
    critic_target: ParamStore,
    critic_opt: AdamState,
    log_alpha: ParamId,
    alpha_store: ParamStore,
    alpha_opt: AdamState,
    critic_steps: u64,
    rng: ChaCha8Rng,
}

fn hidden_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(hidden, layers));
    dims.push(output);
    dims
}

/// `ln(1 − tanh²u) = 2(ln 2 − u − softplus(−2u))`, stable for large |u|.
fn log_one_minus_tanh_sq(g: &mut Graph, u: NodeId) -> Result<NodeId> {
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let s = g.add(u, sp)?;
    let neg = g.scale(s, -2.0);
    Ok(g.add_scalar(neg, 2.0 * LN_2))
}

impl SacAgent {
    pub fn new(spec: &EnvSpec, config: SacConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        let act = Activation::Relu;
        let mut actor_store = ParamStore::new();
        let actor = Mlp::new(
            &mut actor_store,
            "actor",
            &hidden_dims(sd, config.hidden, config.hidden_layers, 2 * ad),
            act,
            &mut rng,
        );
        let mut critic_store = ParamStore::new();
        let qdims = hidden_dims(sd + ad, config.hidden, config.hidden_layers, 1);
        let q1 = Mlp::new(&mut critic_store, "q1", &qdims, act, &mut rng);
        let q2 = Mlp::new(&mut critic_store, "q2", &qdims, act, &mut rng);
        let critic_target = critic_store.clone();
        let mut alpha_store = ParamStore::new();
        let initial = match config.temperature {
            Temperature::Learned { initial } => initial,
            Temperature::Fixed { value } => value.max(f64::MIN_POSITIVE),
        };
        let log_alpha = alpha_store.add("log_alpha", Tensor::scalar(initial.ln()));
        Self {
            actor_opt: AdamState::new(AdamConfig::with_lr(config.actor_lr), &actor_store),
            critic_opt: AdamState::new(AdamConfig::with_lr(config.critic_lr), &critic_store),
            alpha_opt: AdamState::new(AdamConfig::with_lr(config.alpha_lr), &alpha_store),
            state_dim: sd,
            action_dim: ad,
            action_low: spec.action_low.clone(),
            action_high: spec.action_high.clone(),
            target_entropy: -(ad as f64),
            actor,
            actor_store,
            q1,
            q2,
            critic_store,
            critic_target,
            log_alpha,
            alpha_store,
            critic_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xA11CE),
            config,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    pub fn alpha(&self) -> f64 {
        match self.config.temperature {
            Temperature::Fixed { value } => value,
            Temperature::Learned { .. } => self.alpha_store.get(self.log_alpha).item().exp(),
        }
    }

    pub fn critic_steps(&self) -> u64 {
        self.critic_steps
    }

    pub fn actor_params(&self) -> &ParamStore {
        &self.actor_store
    }

    pub fn actor_params_mut(&mut self) -> &mut ParamStore {
        &mut self.actor_store
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.critic_store
    }

    pub fn critic_target_params(&self) -> &ParamStore {
        &self.critic_target
    }

    /// Environment action → `[-1, 1]`.
    pub fn normalize_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| 2.0 * (a - lo) / (hi - lo) - 1.0)
            .collect()
    }

    /// `[-1, 1]` → environment action.
    pub fn scale_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| lo + 0.5 * (a + 1.0) * (hi - lo))
            .collect()
    }

    /// Pre-squash Gaussian `(mean, log_std)` nodes, each `[B × A]`.
    fn policy_head(&self, g: &mut Graph, states: NodeId, mode: Mode) -> Result<(NodeId, NodeId)> {
        let out = self.actor.forward(g, &self.actor_store, states, mode)?;
        let a = self.action_dim;
        let mean = g.slice_cols(out, 0, a)?;
        let log_std = g.slice_cols(out, a, 2 * a)?;
        Ok((mean, g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// Reparameterised sample: squashed action `[B × A]` and its log
    /// density `[B]`.
    fn sample_policy(&mut self, g: &mut Graph, states: NodeId, mode: Mode) -> Result<(NodeId, NodeId)> {
        let (mean, log_std) = self.policy_head(g, states, mode)?;
        let b = g.value(mean).rows();
        let a = self.action_dim;
        let eps: Vec<f64> = (0..b * a).map(|_| self.rng.sample(StandardNormal)).collect();
        let gauss: Vec<f64> = eps
            .chunks(a)
            .map(|row| -0.5 * row.iter().map(|e| e * e).sum::<f64>() - 0.5 * a as f64 * (2.0 * PI).ln())
            .collect();
        let eps = g.constant(Tensor::matrix(b, a, eps)?);
        let std = g.exp(log_std);
        let noise = g.mul(std, eps)?;
        let u = g.add(mean, noise)?;
        let action = g.tanh(u);
        let log_std_sum = g.row_sums(log_std)?;
        let correction = log_one_minus_tanh_sq(g, u)?;
        let correction = g.row_sums(correction)?;
        let gauss = g.constant(Tensor::vector(gauss));
        let lp = g.sub(gauss, log_std_sum)?;
        let log_prob = g.sub(lp, correction)?;
        Ok((action, log_prob))
    }

    fn q_values(&self, g: &mut Graph, store: &ParamStore, sa: NodeId, mode: Mode) -> Result<(NodeId, NodeId)> {
        let q1 = self.q1.forward(g, store, sa, mode)?;
        let q2 = self.q2.forward(g, store, sa, mode)?;
        Ok((q1, q2))
    }

    /// Action in environment units.
    pub fn act(&mut self, state: &[f64], mode: ActMode) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(CoreError::DimMismatch {
                what: "state",
                expected: self.state_dim,
                actual: state.len(),
            });
        }
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[state])?);
        let squashed = match mode {
            ActMode::Mean => {
                let (mean, _) = self.policy_head(&mut g, s, Mode::Frozen)?;
                g.value(mean).data().iter().map(|m| m.tanh()).collect::<Vec<_>>()
            }
            ActMode::Sample => {
                let (a, _) = self.sample_policy(&mut g, s, Mode::Frozen)?;
                g.value(a).data().to_vec()
            }
        };
        Ok(self.scale_action(&squashed))
    }

    /// Pre-squash mean and standard deviation for one state.
    pub fn policy_distribution(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[state])?);
        let (mean, log_std) = self.policy_head(&mut g, s, Mode::Frozen)?;
        Ok((
            g.value(mean).data().to_vec(),
            g.value(log_std).data().iter().map(|l| l.exp()).collect(),
        ))
    }

    /// Q-estimates of both critics for environment-unit actions.
    pub fn q_estimates(&self, states: &[&[f64]], actions: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
        let normed: Vec<Vec<f64>> = actions.iter().map(|a| self.normalize_action(a)).collect();
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(states)?);
        let a = g.constant(Tensor::from_rows(&normed)?);
        let sa = g.concat_cols(&[s, a])?;
        let (q1, q2) = self.q_values(&mut g, &self.critic_store, sa, Mode::Frozen)?;
        Ok((g.value(q1).data().to_vec(), g.value(q2).data().to_vec()))
    }

    /// Bellman targets `r + γ(1 − done)(min Q̄(s', a') − α log π(a'|s'))`.
    /// With `next_action`, `a'` comes from that function (in `[-1, 1]`)
    /// and carries no entropy term.
    pub fn q_targets(&mut self, batch: &SacBatch, next_action: Option<NextActionFn<'_>>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let s2 = g.constant(Tensor::from_rows(&batch.next_states)?);
        let (a2, entropy_term) = match next_action {
            Some(f) => {
                let rows: Vec<Vec<f64>> = batch.next_states.iter().map(|s| f(s)).collect();
                (g.constant(Tensor::from_rows(&rows)?), vec![0.0; batch.len()])
            }
            None => {
                let (a2, lp) = self.sample_policy(&mut g, s2, Mode::Frozen)?;
                let alpha = self.alpha();
                let ent = g.value(lp).data().iter().map(|l| alpha * l).collect();
                (a2, ent)
            }
        };
        let sa2 = g.concat_cols(&[s2, a2])?;
        let (t1, t2) = self.q_values(&mut g, &self.critic_target, sa2, Mode::Frozen)?;
        let (t1, t2) = (g.value(t1).data(), g.value(t2).data());
        Ok((0..batch.len())
            .map(|i| {
                let v = t1[i].min(t2[i]) - entropy_term[i];
                let cont = if batch.dones[i] { 0.0 } else { 1.0 };
                batch.rewards[i] + self.config.gamma * cont * v
            })
            .collect())
    }

    fn check(&self, what: &'static str, value: f64) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(CoreError::NonFinite {
                what,
                value,
                update: self.critic_steps,
            })
        }
    }

    /// One critic step toward externally chosen next actions, without
    /// touching the actor or the temperature.
    pub fn update_critic(&mut self, batch: &SacBatch, next_action: Option<NextActionFn<'_>>) -> Result<f64> {
        let targets = self.q_targets(batch, next_action)?;
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&batch.states)?);
        let a = g.constant(Tensor::from_rows(&batch.actions)?);
        let sa = g.concat_cols(&[s, a])?;
        let y = g.constant(Tensor::matrix(batch.len(), 1, targets)?);
        let (q1, q2) = self.q_values(&mut g, &self.critic_store, sa, Mode::Train)?;
        let d1 = g.sub(q1, y)?;
        let d2 = g.sub(q2, y)?;
        let l1 = g.square(d1);
        let l2 = g.square(d2);
        let m1 = g.mean(l1)?;
        let m2 = g.mean(l2)?;
        let loss = g.add(m1, m2)?;
        let value = self.check("critic loss", g.value(loss).item())?;
        let grads = g.backward(loss)?;
        self.critic_opt.step(&mut self.critic_store, &grads);
        self.critic_steps += 1;
        if self.critic_steps.is_multiple_of(self.config.target_update_every) {
            self.critic_target.blend_from(&self.critic_store, self.config.tau)?;
        }
        Ok(value)
    }

    /// Actor and temperature step; returns `(actor loss, alpha loss,
    /// entropy estimate)`.
    fn update_actor_and_alpha(&mut self, batch: &SacBatch) -> Result<(f64, f64, f64)> {
        let alpha = self.alpha();
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&batch.states)?);
        let (a, log_prob) = self.sample_policy(&mut g, s, Mode::Train)?;
        let sa = g.concat_cols(&[s, a])?;
        let (q1, q2) = self.q_values(&mut g, &self.critic_store, sa, Mode::Frozen)?;
        let q = g.minimum(q1, q2)?;
        let q = g.reshape(q, vec![batch.len()])?;
        let weighted = g.scale(log_prob, alpha);
        let diff = g.sub(weighted, q)?;
        let loss = g.mean(diff)?;
        let actor_loss = self.check("actor loss", g.value(loss).item())?;
        let log_probs = g.value(log_prob).data().to_vec();
        let grads = g.backward(loss)?;
        self.actor_opt.step(&mut self.actor_store, &grads);
        let entropy = -log_probs.iter().sum::<f64>() / log_probs.len() as f64;
        let alpha_loss = match self.config.temperature {
            Temperature::Fixed { .. } => 0.0,
            Temperature::Learned { .. } => {
                let mut g = Graph::new();
                let la = g.param(&self.alpha_store, self.log_alpha);
                let alpha = g.exp(la);
                let loss = g.scale(alpha, entropy - self.target_entropy);
                let value = self.check("temperature loss", g.value(loss).item())?;
                let grads = g.backward(loss)?;
                self.alpha_opt.step(&mut self.alpha_store, &grads);
                value
            }
        };
        Ok((actor_loss, alpha_loss, entropy))
    }

    /// `∂/∂ln α` of the temperature loss `α·(H − H_target)` given
    /// sampled log-densities.
    pub fn temperature_gradient(&self, log_probs: &[f64]) -> f64 {
        let entropy = -log_probs.iter().sum::<f64>() / log_probs.len() as f64;
        self.alpha() * (entropy - self.target_entropy)
    }

    /// One step each on the critics, the actor and the temperature.
    pub fn update(&mut self, batch: &SacBatch) -> Result<SacLosses> {
        let critic = self.update_critic(batch, None)?;
        let (actor, alpha, entropy) = self.update_actor_and_alpha(batch)?;
        Ok(SacLosses {
            critic,
            actor,
            alpha,
            temperature: self.alpha(),
            entropy,
        })
    }

    /// Batch of buffer transitions with rewards chosen by `reward`.
    pub fn make_batch(&self, transitions: &[&Transition], reward: impl Fn(&Transition) -> f64) -> SacBatch {
        SacBatch {
            states: transitions.iter().map(|t| t.state.clone()).collect(),
            actions: transitions.iter().map(|t| self.normalize_action(&t.action)).collect(),
            rewards: transitions.iter().map(|t| reward(t)).collect(),
            next_states: transitions.iter().map(|t| t.next_state.clone()).collect(),
            // Fixed-horizon episodes: time limits bootstrap.
            dones: vec![false; transitions.len()],
        }
    }

    /// Re-initialises both critics and their targets.
    pub fn reset_critic(&mut self) {
        let fresh = SacAgent::new_critic_only(self);
        self.critic_store.copy_from(&fresh).expect("same layout");
        self.critic_target.copy_from(&fresh).expect("same layout");
        self.critic_opt = AdamState::new(AdamConfig::with_lr(self.config.critic_lr), &self.critic_store);
        self.critic_steps = 0;
    }

    fn new_critic_only(&mut self) -> ParamStore {
        let mut store = ParamStore::new();
        let seed = self.rng.random::<u64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qdims = hidden_dims(
            self.state_dim + self.action_dim,
            self.config.hidden,
            self.config.hidden_layers,
            1,
        );
        Mlp::new(&mut store, "q1", &qdims, Activation::Relu, &mut rng);
        Mlp::new(&mut store, "q2", &qdims, Activation::Relu, &mut rng);
        store
    }

    pub fn save_policy(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.actor_store, &dir.join("actor.bin"), &dir.join("actor.json"))?;
        save_checkpoint(&self.critic_store, &dir.join("critic.bin"), &dir.join("critic.json"))?;
        Ok(())
    }

    pub fn load_policy(&mut self, dir: &Path) -> Result<()> {
        let records = reed_diffmath::load_checkpoint(&dir.join("actor.bin"))?;
        self.actor_store.load_records(records)?;
        let records = reed_diffmath::load_checkpoint(&dir.join("critic.bin"))?;
        self.critic_store.load_records(records)?;
        self.critic_target.copy_from(&self.critic_store)?;
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `ln(d_k + 1)` with `d_k` the distance from `state` to its `k`-th
/// nearest stored state (or the farthest one when fewer are stored).
pub fn intrinsic_reward(buffer: &ReplayBuffer, state: &[f64], k: usize) -> f64 {
    assert!(!buffer.is_empty(), "intrinsic reward needs a non-empty buffer");
    let mut d: Vec<f64> = buffer.iter().map(|t| sq_dist(&t.state, state)).collect();
    let k = k.clamp(1, d.len());
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    (kth.sqrt() + 1.0).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Leading steps with uniformly random actions.
    pub seed_steps: usize,
    pub knn_k: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed_steps: 1000,
            knn_k: 5,
        }
    }
}

/// Live episode state for stepping an environment transition by
/// transition.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub env: Env,
    pub state: Vec<f64>,
    pub episode_id: u64,
    pub step_index: usize,
    pub episode_return: f64,
    seed: u64,
}

impl Rollout {
    pub fn new(env: Env, seed: u64) -> Self {
        let state = env.reset(Self::episode_seed(seed, 0));
        Self {
            env,
            state,
            episode_id: 0,
            step_index: 0,
            episode_return: 0.0,
            seed,
        }
    }

    fn episode_seed(seed: u64, episode: u64) -> u64 {
        seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(episode)
    }

    /// Applies `action`; returns the transition and, when the episode
    /// hits its horizon, its true return (after which a new episode
    /// starts).
    pub fn step(&mut self, action: &[f64]) -> Result<(Transition, Option<f64>)> {
        let out = self.env.step(&self.state, action)?;
        let t = Transition {
            state: std::mem::replace(&mut self.state, out.next_state.clone()),
            action: action.to_vec(),
            next_state: out.next_state,
            reward_true: out.reward_true,
            reward_hat: 0.0,
            step_index: self.step_index,
            episode_id: self.episode_id,
        };
        self.episode_return += out.reward_true;
        self.step_index += 1;
        if self.step_index >= self.env.spec().episode_len {
            let ret = self.episode_return;
            self.start_next_episode();
            Ok((t, Some(ret)))
        } else {
            Ok((t, None))
        }
    }

    /// Abandons the current episode and resets.
    pub fn start_next_episode(&mut self) {
        self.episode_id += 1;
        self.state = self.env.reset(Self::episode_seed(self.seed, self.episode_id));
        self.step_index = 0;
        self.episode_return = 0.0;
    }
}

/// Uniform action in environment units.
pub fn random_action<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    spec.action_low
        .iter()
        .zip(&spec.action_high)
        .map(|(&lo, &hi)| rng.random_range(lo..=hi))
        .collect()
}

/// Runs SAC on the k-NN entropy bonus for `config.steps` environment
/// steps, filling `buffer`. Returns completed episode returns.
pub fn pretrain_explore<R: Rng + ?Sized>(
    agent: &mut SacAgent,
    rollout: &mut Rollout,
    buffer: &mut ReplayBuffer,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut returns = Vec::new();
    let spec = rollout.env.spec().clone();
    for step in 0..config.steps {
        let action = if step < config.seed_steps {
            random_action(&spec, rng)
        } else {
            agent.act(&rollout.state.clone(), ActMode::Sample)?
        };
        let (t, done) = rollout.step(&action)?;
        buffer.push(t);
        if let Some(r) = done {
            returns.push(r);
        }
        if step >= config.seed_steps {
            let sample = buffer.sample(agent.config.batch_size, rng);
            let batch = agent.make_batch(&sample, |t| intrinsic_reward(buffer, &t.next_state, config.knn_k));
            agent.update(&batch)?;
        }
    }
    Ok(returns)
}

/// Rewrites every stored `reward_hat` with the ensemble mean.
pub fn relabel_rewards(buffer: &mut ReplayBuffer, ensemble: &RewardEnsemble) -> Result<()> {
    const CHUNK: usize = 1024;
    let mut fresh = Vec::with_capacity(buffer.len());
    let items: Vec<&Transition> = buffer.iter_mut().map(|t| &*t).collect();
    for chunk in items.chunks(CHUNK) {
        let s: Vec<&[f64]> = chunk.iter().map(|t| t.state.as_slice()).collect();
        let a: Vec<&[f64]> = chunk.iter().map(|t| t.action.as_slice()).collect();
        fresh.extend(ensemble.mean_rewards(&s, &a)?);
    }
    for (t, r) in buffer.iter_mut().zip(fresh) {
        t.reward_hat = r;
    }
    Ok(())
}
