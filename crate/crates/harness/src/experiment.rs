//! The training loop: exploration pretraining, then policy training
//! with a feedback session every K steps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reed_pbrl_core::agent::{
    intrinsic_reward, pretrain_explore, random_action, relabel_rewards, ActMode, Rollout, SacAgent,
};
use reed_pbrl_core::buffer::{ReplayBuffer, Transition};
use reed_pbrl_core::envsim::Env;
use reed_pbrl_core::query::{disagreement_select, sample_candidates};
use reed_pbrl_core::reed::{train_reed_epoch, ReedMode, SprHeads};
use reed_pbrl_core::rewardnet::{PreferenceDataset, PreferenceTriple, RewardEnsemble, TrainSettings};
use reed_pbrl_core::teachers::{LabelOutcome, RecentReturnTracker, Teacher};

use crate::config::{ExperimentConfig, RewardSource};
use crate::error::{HarnessError, Result};
use crate::metrics::{event, MetricsLog, Snapshot, StabilityPoint, StabilityTracker};
use crate::output;
use crate::server::{HumanTeacher, MetricRow, SegmentView};

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub ensemble: Option<RewardEnsemble>,
    pub dataset: PreferenceDataset,
    pub discarded: usize,
    pub stability: Vec<StabilityPoint>,
    pub agent: SacAgent,
    /// Not part of the log so that logs compare bitwise across runs.
    pub wall_clock_secs: f64,
}

/// Transitions whose stored `reward_hat` is not bitwise the current
/// ensemble mean. Recomputed with a different batching than the relabel
/// pass so that a chunking bug would show up here.
pub fn stale_count(buffer: &ReplayBuffer, ensemble: &RewardEnsemble) -> Result<usize> {
    let items: Vec<_> = buffer.iter().collect();
    let mut stale = 0;
    for chunk in items.chunks(97) {
        let s: Vec<&[f64]> = chunk.iter().map(|t| t.state.as_slice()).collect();
        let a: Vec<&[f64]> = chunk.iter().map(|t| t.action.as_slice()).collect();
        let fresh = ensemble.mean_rewards(&s, &a)?;
        stale += chunk
            .iter()
            .zip(fresh)
            .filter(|(t, r)| t.reward_hat.to_bits() != r.to_bits())
            .count();
    }
    Ok(stale)
}

/// Source of labels for a session.
pub enum Labeler<'a> {
    Simulated(Box<Teacher>),
    Human(&'a mut HumanTeacher),
}

fn outcome_code(o: LabelOutcome) -> f64 {
    match o {
        LabelOutcome::Prefer1 => 1.0,
        LabelOutcome::Prefer2 => 2.0,
        LabelOutcome::Equal => 0.5,
        LabelOutcome::Discard => 0.0,
    }
}

fn outcome_name(o: LabelOutcome) -> &'static str {
    match o {
        LabelOutcome::Prefer1 => "prefer_first",
        LabelOutcome::Prefer2 => "prefer_second",
        LabelOutcome::Equal => "equal",
        LabelOutcome::Discard => "discard",
    }
}

/// Mutable state threaded through the loop.
struct Trainer<'a> {
    config: &'a ExperimentConfig,
    env: Env,
    agent: SacAgent,
    rollout: Rollout,
    buffer: ReplayBuffer,
    pushed: u64,
    log: MetricsLog,
    rng: ChaCha8Rng,
    query_rng: ChaCha8Rng,
    ensemble: RewardEnsemble,
    heads: Vec<SprHeads>,
    dataset: PreferenceDataset,
    discarded: usize,
    sessions_done: usize,
    returns: RecentReturnTracker,
    stability: StabilityTracker,
    stability_points: Vec<StabilityPoint>,
    labeler: Labeler<'a>,
}

impl<'a> Trainer<'a> {
    fn push(&mut self, t: Transition) {
        self.buffer.push(t);
        self.pushed += 1;
    }

    fn log_episode(&mut self, global_step: u64, policy_step: usize, ret: f64, phase: &str) {
        let episode = self.rollout.episode_id - 1;
        self.log.push(global_step, episode, event::EPISODE_RETURN, ret, phase);
        if phase == "train" {
            self.returns.update(policy_step, ret);
        }
        if let Labeler::Human(h) = &self.labeler {
            h.hub().push_metric(MetricRow {
                step: global_step,
                episode,
                value: ret,
            });
        }
    }

    fn session(&mut self, step: usize, global: u64) -> Result<()> {
        let s = self.sessions_done;
        let cfg = self.config;
        let tag = |extra: String| format!("session={s}{extra}");

        if cfg.reed.mode != ReedMode::None {
            let seed = cfg.seed ^ ((s as u64 + 1) << 32);
            let report = train_reed_epoch(&mut self.ensemble, &mut self.heads, &self.buffer, &cfg.reed, seed)?;
            for (e, l) in report.epoch_losses.iter().enumerate() {
                self.log.push(global, 0, event::REED_LOSS, *l, tag(format!(",epoch={e}")));
            }
            if report.collapsed {
                log::warn!(
                    "session {s}: auxiliary representation collapse (similarity {:.4}, {} degenerate rows)",
                    report.max_target_similarity,
                    report.excluded_rows
                );
                self.log.push(
                    global,
                    0,
                    event::REED_COLLAPSE,
                    report.max_target_similarity,
                    tag(format!(",excluded={}", report.excluded_rows)),
                );
            }
        }

        let m = cfg.queries_per_session;
        let candidates = sample_candidates(&self.buffer, m * cfg.candidate_multiplier.max(1), cfg.segment_len, &mut self.query_rng)?;
        let chosen = disagreement_select(&self.ensemble, candidates, m)?;
        for q in &chosen {
            self.log.push(global, 0, event::QUERY_SELECTED, q.score, tag(format!(",index={}", q.index)));
        }

        let outcomes = match &mut self.labeler {
            Labeler::Simulated(teacher) => {
                let avg = self.returns.average(step).unwrap_or(0.0);
                chosen
                    .iter()
                    .map(|q| teacher.label(&q.pair.sigma1, &q.pair.sigma2, avg))
                    .collect::<std::result::Result<Vec<_>, _>>()?
            }
            Labeler::Human(h) => {
                let views = chosen
                    .iter()
                    .map(|q| {
                        (
                            SegmentView::new(&self.env, &q.pair.sigma1),
                            SegmentView::new(&self.env, &q.pair.sigma2),
                        )
                    })
                    .collect();
                h.run_session(s as u64, views)?
            }
        };
        for (q, o) in chosen.into_iter().zip(outcomes) {
            self.log.push(global, 0, event::LABEL, outcome_code(o), tag(format!(",outcome={}", outcome_name(o))));
            match o.y_p() {
                Some(y_p) => self.dataset.push(PreferenceTriple {
                    sigma1: q.pair.sigma1,
                    sigma2: q.pair.sigma2,
                    y_p,
                }),
                None => self.discarded += 1,
            }
        }

        if !self.dataset.is_empty() {
            let settings = TrainSettings {
                epochs: cfg.reward_epochs,
                batch_size: cfg.reward_batch,
                stop_at_accuracy: cfg.reward_stop_accuracy,
            };
            let reports = self.ensemble.train_on_preferences(&self.dataset, &settings)?;
            for (i, r) in reports.iter().enumerate() {
                self.log.push(global, 0, event::PREF_LOSS, r.loss, tag(format!(",member={i}")));
                self.log.push(global, 0, event::PREF_ACCURACY, r.accuracy, tag(format!(",member={i}")));
            }
        }

        relabel_rewards(&mut self.buffer, &self.ensemble)?;
        let stale = stale_count(&self.buffer, &self.ensemble)?;
        let rewards: Vec<f64> = self.buffer.iter().map(|t| t.reward_hat).collect();
        let mean = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        self.log.push(
            global,
            0,
            event::RELABEL,
            mean,
            tag(format!(",transitions={},stale={stale}", rewards.len())),
        );
        let snap = Snapshot {
            first_id: self.pushed - self.buffer.len() as u64,
            rewards,
        };
        if let Some(p) = self.stability.record(&snap) {
            self.log.push(
                global,
                0,
                event::REWARD_VARIANCE,
                p.mean,
                tag(format!(",sd={},transitions={},updates={}", p.sd, p.transitions, p.updates)),
            );
            self.stability_points.push(p);
        }

        self.sessions_done += 1;
        self.log.push(
            global,
            0,
            event::SESSION_END,
            self.dataset.len() as f64,
            tag(format!(",discarded={},asked={}", self.discarded, self.sessions_done * m)),
        );
        debug_assert_eq!(self.dataset.len() + self.discarded, self.sessions_done * m);
        Ok(())
    }

    /// SAC step on a sampled batch with the reward the run trains on.
    fn update_policy(&mut self, knn_k: usize) -> Result<f64> {
        let batch = {
            let sample = self.buffer.sample(self.agent.config.batch_size, &mut self.rng);
            match (self.config.reward_source, self.sessions_done) {
                (RewardSource::GroundTruth, _) => self.agent.make_batch(&sample, |t| t.reward_true),
                (RewardSource::Learned, 0) => {
                    self.agent.make_batch(&sample, |t| intrinsic_reward(&self.buffer, &t.next_state, knn_k))
                }
                (RewardSource::Learned, _) => self.agent.make_batch(&sample, |t| t.reward_hat),
            }
        };
        Ok(self.agent.update(&batch)?.critic)
    }
}

fn evaluate(env: &Env, agent: &mut SacAgent, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|e| {
            let mut s = env.reset(seed.wrapping_mul(31).wrapping_add(1_000_003 + e as u64));
            let mut ret = 0.0;
            for _ in 0..env.spec().episode_len {
                let a = agent.act(&s, ActMode::Mean)?;
                let out = env.step(&s, &a).map_err(reed_pbrl_core::CoreError::from)?;
                ret += out.reward_true;
                s = out.next_state;
            }
            Ok(ret)
        })
        .collect()
}

/// Runs one experiment. `human` must be given exactly when
/// `config.human` is set.
pub fn run_experiment(config: &ExperimentConfig, human: Option<&mut HumanTeacher>) -> Result<RunOutput> {
    config.validate()?;
    if let Some(dir) = &config.out_dir {
        output::write_manifest(dir, config, "running", None, None)?;
    }
    let started = Instant::now();
    let result = run_inner(config, human, started);
    if let Some(dir) = &config.out_dir {
        match &result {
            Ok(out) => {
                save_checkpoint(out, &dir.join("checkpoint"))?;
                output::emit_outputs(&out.log, dir)?;
                output::write_manifest(dir, config, "finished", Some(out), None)?;
            }
            Err(e) => output::write_manifest(dir, config, "failed", None, Some(&e.to_string()))?,
        }
    }
    result
}

fn run_inner(config: &ExperimentConfig, human: Option<&mut HumanTeacher>, started: Instant) -> Result<RunOutput> {
    let env = config.make_env()?;
    let spec = env.spec().clone();
    let labeler = match (config.human, human) {
        (true, Some(h)) => Labeler::Human(h),
        (false, None) => Labeler::Simulated(Box::new(Teacher::new(config.teacher.clone())?)),
        (true, None) => return Err(HarnessError::Config("human labelling needs a feedback channel".into())),
        (false, Some(_)) => return Err(HarnessError::Config("feedback channel given to a simulated run".into())),
    };
    let mut sac = config.sac.clone();
    sac.seed = config.seed;
    let ensemble = RewardEnsemble::new(config.reward_net.clone(), spec.state_dim, spec.action_dim, config.seed.wrapping_add(1));
    let heads = if config.reed.mode != ReedMode::None && config.reward_source == RewardSource::Learned {
        SprHeads::for_ensemble(&ensemble, &config.reed, config.seed.wrapping_add(2))?
    } else {
        Vec::new()
    };
    let mut t = Trainer {
        config,
        agent: SacAgent::new(&spec, sac),
        rollout: Rollout::new(env.clone(), config.seed),
        env,
        buffer: ReplayBuffer::new((config.pretrain.steps + config.total_steps).max(1)),
        pushed: 0,
        log: MetricsLog::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3)),
        query_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(4)),
        ensemble,
        heads,
        dataset: PreferenceDataset::new(),
        discarded: 0,
        sessions_done: 0,
        returns: RecentReturnTracker::new(config.session_interval.max(1)),
        stability: StabilityTracker::new(),
        stability_points: Vec::new(),
        labeler,
    };

    // Exploration pretraining on the state-entropy bonus.
    let pre = config.pretrain.steps;
    if pre > 0 {
        let mut explore = config.pretrain.clone();
        explore.steps = pre;
        let mut buffer = std::mem::replace(&mut t.buffer, ReplayBuffer::new(1));
        let returns = pretrain_explore(&mut t.agent, &mut t.rollout, &mut buffer, &explore, &mut t.rng)?;
        t.pushed = buffer.len() as u64;
        t.buffer = buffer;
        let ep_len = spec.episode_len as u64;
        for (i, r) in returns.into_iter().enumerate() {
            t.log.push((i as u64 + 1) * ep_len, i as u64, event::EPISODE_RETURN, r, "pretrain");
        }
        // Episodes restart at policy training so every run shares one grid.
        if t.rollout.step_index > 0 {
            t.rollout.start_next_episode();
        }
        t.agent.reset_critic();
    }
    t.log.push(pre as u64, t.rollout.episode_id, event::PRETRAIN_DONE, pre as f64, "");

    let sessions = config.sessions();
    let mut last_critic = f64::NAN;
    for step in 0..config.total_steps {
        let global = (pre + step) as u64;
        if t.sessions_done < sessions && step % config.session_interval == 0 {
            t.session(step, global)?;
        }
        let state = t.rollout.state.clone();
        let action = if t.buffer.is_empty() || (pre == 0 && step < config.pretrain.seed_steps) {
            random_action(&spec, &mut t.rng)
        } else {
            t.agent.act(&state, ActMode::Sample)?
        };
        let (mut tr, done) = t.rollout.step(&action)?;
        if config.reward_source == RewardSource::Learned && t.sessions_done > 0 {
            tr.reward_hat = t.ensemble.ensemble_mean_reward(&tr.state, &tr.action)?;
        }
        t.push(tr);
        if pre > 0 || step >= config.pretrain.seed_steps {
            last_critic = t.update_policy(config.pretrain.knn_k)?;
        }
        if let Some(ret) = done {
            t.log_episode(global + 1, step, ret, "train");
            if last_critic.is_finite() {
                t.log.push(global + 1, t.rollout.episode_id - 1, event::SAC_LOSS, last_critic, "");
            }
        }
    }

    let end = (pre + config.total_steps) as u64;
    for (i, r) in evaluate(&t.env, &mut t.agent, config.eval_episodes, config.seed)?.into_iter().enumerate() {
        t.log.push(end, i as u64, event::EVAL_RETURN, r, "");
    }

    let learned = config.reward_source == RewardSource::Learned;
    Ok(RunOutput {
        log: t.log,
        ensemble: learned.then_some(t.ensemble),
        dataset: t.dataset,
        discarded: t.discarded,
        stability: t.stability_points,
        agent: t.agent,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Writes `reward/`, `policy/` and `d_pref.jsonl` under `dir`.
pub fn save_checkpoint(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_at(dir))?;
    if let Some(ens) = &out.ensemble {
        ens.save(&dir.join("reward"))?;
    }
    out.agent.save_policy(&dir.join("policy"))?;
    out.dataset.save_jsonl(&dir.join("d_pref.jsonl"))?;
    Ok(())
}

/// Finds the reward ensemble inside a run directory, its `checkpoint/`
/// directory, or the ensemble directory itself.
pub fn resolve_reward_dir(path: &Path) -> Result<PathBuf> {
    for candidate in [path.join("checkpoint").join("reward"), path.join("reward"), path.to_path_buf()] {
        if candidate.join("ensemble.json").is_file() {
            return Ok(candidate);
        }
    }
    Err(HarnessError::Checkpoint {
        path: path.to_path_buf(),
        reason: "no ensemble.json found".into(),
    })
}

/// Trains a fresh policy from scratch against the frozen ensemble mean
/// of `checkpoint`. Nothing is written back to the checkpoint.
pub fn reuse_reward(checkpoint: &Path, config: &ExperimentConfig) -> Result<RunOutput> {
    let dir = resolve_reward_dir(checkpoint)?;
    let ensemble = RewardEnsemble::load(&dir)?;
    let env = config.make_env()?;
    let spec = env.spec().clone();
    if ensemble.state_dim() != spec.state_dim || ensemble.action_dim() != spec.action_dim {
        return Err(HarnessError::Checkpoint {
            path: dir,
            reason: format!(
                "reward expects state/action dims {}/{} but {} has {}/{}",
                ensemble.state_dim(),
                ensemble.action_dim(),
                spec.name,
                spec.state_dim,
                spec.action_dim
            ),
        });
    }
    let started = Instant::now();
    let mut sac = config.sac.clone();
    sac.seed = config.seed;
    let mut agent = SacAgent::new(&spec, sac);
    let mut rollout = Rollout::new(env.clone(), config.seed);
    let warmup = config.pretrain.seed_steps;
    let mut buffer = ReplayBuffer::new((warmup + config.total_steps).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let mut log = MetricsLog::new();
    for step in 0..warmup + config.total_steps {
        let action = if step < warmup {
            random_action(&spec, &mut rng)
        } else {
            agent.act(&rollout.state.clone(), ActMode::Sample)?
        };
        let (mut tr, done) = rollout.step(&action)?;
        tr.reward_hat = ensemble.ensemble_mean_reward(&tr.state, &tr.action)?;
        buffer.push(tr);
        if step >= warmup {
            let sample = buffer.sample(agent.config.batch_size, &mut rng);
            let batch = agent.make_batch(&sample, |t| t.reward_hat);
            agent.update(&batch)?;
        }
        if let Some(ret) = done {
            let phase = if step >= warmup { "train" } else { "warmup" };
            log.push(step as u64 + 1, rollout.episode_id - 1, event::EPISODE_RETURN, ret, phase);
        }
    }
    let end = (warmup + config.total_steps) as u64;
    for (i, r) in evaluate(&env, &mut agent, config.eval_episodes, config.seed)?.into_iter().enumerate() {
        log.push(end, i as u64, event::EVAL_RETURN, r, "");
    }
    Ok(RunOutput {
        log,
        ensemble: Some(ensemble),
        dataset: PreferenceDataset::new(),
        discarded: 0,
        stability: Vec::new(),
        agent,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
