use std::path::PathBuf;

use reed_pbrl_core::agent::{PretrainConfig, SacConfig};
use reed_pbrl_core::envsim::Env;
use reed_pbrl_core::reed::{ReedConfig, ReedMode};
use reed_pbrl_core::rewardnet::{RewardArch, RewardNetConfig};
use reed_pbrl_core::teachers::{Strategy, TeacherConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Where the policy's training reward comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// Preference-learned ensemble mean.
    Learned,
    /// True environment reward; no feedback sessions.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: String,
    pub episode_len: Option<usize>,
    pub teacher: TeacherConfig,
    /// Label the queries through the HTTP API instead of `teacher`.
    pub human: bool,
    /// Total preference queries over the run.
    pub feedback: usize,
    /// Queries per feedback session (M).
    pub queries_per_session: usize,
    /// Policy steps between sessions (K).
    pub session_interval: usize,
    /// Segment length (l).
    pub segment_len: usize,
    /// Candidates scored per selected query.
    pub candidate_multiplier: usize,
    /// Policy-training steps after exploration pretraining.
    pub total_steps: usize,
    pub pretrain: PretrainConfig,
    pub reward_source: RewardSource,
    pub reward_net: RewardNetConfig,
    pub reward_epochs: usize,
    pub reward_batch: usize,
    /// Preference training stops early once every member reaches this
    /// training accuracy.
    pub reward_stop_accuracy: Option<f64>,
    pub reed: ReedConfig,
    pub sac: SacConfig,
    /// Deterministic evaluation episodes at the end of the run.
    pub eval_episodes: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: K = 2000 and 50k policy steps.
    pub fn desk(env: &str, seed: u64) -> Result<Self> {
        let e = Env::from_name(env).map_err(|e| HarnessError::Config(e.to_string()))?;
        let (sd, ad) = (e.spec().state_dim, e.spec().action_dim);
        let reward_net = RewardNetConfig {
            hidden: 128,
            ..RewardNetConfig::for_dims(sd, ad)
        };
        let projection = (reward_net.state_embed / 2).max(1);
        Ok(Self {
            env: env.to_string(),
            episode_len: None,
            teacher: TeacherConfig::new(Strategy::Oracle, seed.wrapping_add(17)),
            human: false,
            feedback: 50,
            queries_per_session: 5,
            session_interval: 2000,
            segment_len: 50,
            candidate_multiplier: 10,
            total_steps: 50_000,
            pretrain: PretrainConfig::default(),
            reward_source: RewardSource::Learned,
            reward_net,
            reward_epochs: 50,
            reward_batch: 16,
            reward_stop_accuracy: Some(0.97),
            reed: ReedConfig::new(ReedMode::Contrast, projection),
            sac: SacConfig {
                hidden: 256,
                seed,
                ..SacConfig::default()
            },
            eval_episodes: 10,
            seed,
            out_dir: None,
        })
    }

    /// Small networks and a short schedule for the point-mass trend
    /// checks: 100-step episodes, 6k policy steps, 20 labels in 5
    /// sessions of 4.
    pub fn quick(env: &str, seed: u64) -> Result<Self> {
        let mut c = Self::desk(env, seed)?;
        c.episode_len = Some(100);
        c.feedback = 20;
        c.queries_per_session = 4;
        c.session_interval = 1000;
        c.segment_len = 25;
        c.total_steps = 6000;
        c.pretrain = PretrainConfig {
            steps: 2000,
            seed_steps: 1000,
            knn_k: 5,
        };
        c.reward_net.hidden = 64;
        c.reed.epochs = 5;
        c.reed.batch_size = 128;
        c.sac = SacConfig {
            hidden: 64,
            batch_size: 128,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            seed,
            ..SacConfig::default()
        };
        Ok(c)
    }

    pub fn make_env(&self) -> Result<Env> {
        let env = Env::from_name(&self.env).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(match self.episode_len {
            Some(n) => env.with_episode_len(n),
            None => env,
        })
    }

    pub fn sessions(&self) -> usize {
        if self.reward_source == RewardSource::GroundTruth || self.queries_per_session == 0 {
            0
        } else {
            self.feedback / self.queries_per_session
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let env = self.make_env()?;
        if self.reward_source == RewardSource::Learned {
            if self.feedback > 0 && self.queries_per_session == 0 {
                return bad("queries per session must be positive".into());
            }
            if self.queries_per_session > 0 && !self.feedback.is_multiple_of(self.queries_per_session) {
                return bad(format!(
                    "feedback budget {} is not a multiple of {} queries per session",
                    self.feedback, self.queries_per_session
                ));
            }
            if self.sessions() > 0 && self.session_interval == 0 {
                return bad("session interval must be positive".into());
            }
            if self.session_interval * self.sessions() > self.total_steps {
                return bad(format!(
                    "{} sessions every {} steps do not fit in {} steps",
                    self.sessions(),
                    self.session_interval,
                    self.total_steps
                ));
            }
            if self.segment_len == 0 || self.segment_len > env.spec().episode_len {
                return bad(format!(
                    "segment length {} must be in 1..={}",
                    self.segment_len,
                    env.spec().episode_len
                ));
            }
            if self.reed.mode != ReedMode::None && self.reward_net.arch != RewardArch::Saf {
                return bad("auxiliary training needs the state-action fusion network".into());
            }
        }
        if self.pretrain.seed_steps > self.pretrain.steps {
            return bad("random seed steps exceed pretraining steps".into());
        }
        self.teacher.validate()?;
        Ok(())
    }
}
