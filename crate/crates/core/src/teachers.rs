//! Simulated teachers that label segment pairs from ground-truth rewards.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::Segment;
use crate::error::{CoreError, Result};
use crate::rewardnet::{EQUAL, PREFER_FIRST, PREFER_SECOND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Oracle,
    Skip,
    Myopic,
    Equal,
    Mistake,
    Noisy,
}

impl std::str::FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "oracle" => Self::Oracle,
            "skip" => Self::Skip,
            "myopic" => Self::Myopic,
            "equal" => Self::Equal,
            "mistake" => Self::Mistake,
            "noisy" => Self::Noisy,
            other => return Err(CoreError::InvalidConfig(format!("unknown teacher `{other}`"))),
        })
    }
}

/// Which end of a segment the myopic teacher weights most.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MyopicDirection {
    /// Step `t` of `l` weighted by `γ^{l−1−t}`.
    EndWeighted,
    /// Step `t` weighted by `γ^t`.
    StartWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub strategy: Strategy,
    pub myopic_gamma: f64,
    pub myopic_direction: MyopicDirection,
    pub skip_rate: f64,
    pub mistake_rate: f64,
    /// Fraction of the recent average return under which returns tie.
    pub equal_threshold_pct: f64,
    pub noisy_beta: f64,
    pub seed: u64,
}

impl TeacherConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            myopic_gamma: 0.9,
            myopic_direction: MyopicDirection::EndWeighted,
            skip_rate: 0.1,
            mistake_rate: 0.1,
            equal_threshold_pct: 0.005,
            noisy_beta: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.skip_rate) || !in_unit(self.mistake_rate) {
            return Err(CoreError::InvalidConfig("teacher rates must lie in [0, 1]".into()));
        }
        if !(self.myopic_gamma > 0.0 && self.myopic_gamma <= 1.0) {
            return Err(CoreError::InvalidConfig("myopic gamma must lie in (0, 1]".into()));
        }
        if self.equal_threshold_pct.is_nan() || self.equal_threshold_pct < 0.0 || !self.noisy_beta.is_finite() {
            return Err(CoreError::InvalidConfig(
                "equal threshold must be ≥ 0 and beta finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOutcome {
    Prefer1,
    Prefer2,
    Equal,
    Discard,
}

impl LabelOutcome {
    /// Soft label for the cross-entropy; `None` for discarded queries.
    pub fn y_p(self) -> Option<[f64; 2]> {
        match self {
            Self::Prefer1 => Some(PREFER_FIRST),
            Self::Prefer2 => Some(PREFER_SECOND),
            Self::Equal => Some(EQUAL),
            Self::Discard => None,
        }
    }

    fn flipped(self) -> Self {
        match self {
            Self::Prefer1 => Self::Prefer2,
            Self::Prefer2 => Self::Prefer1,
            other => other,
        }
    }
}

fn compare(r1: f64, r2: f64) -> LabelOutcome {
    if r1 > r2 {
        LabelOutcome::Prefer1
    } else if r2 > r1 {
        LabelOutcome::Prefer2
    } else {
        LabelOutcome::Equal
    }
}

/// Stateful labeller: the configuration plus its own RNG stream.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: TeacherConfig,
    rng: ChaCha8Rng,
}

impl Teacher {
    pub fn new(config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, rng })
    }

    fn rewards(seg: &Segment, which: usize) -> Result<Vec<f64>> {
        let r = seg.true_rewards();
        if r.is_empty() || r.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::MissingTrueReward(which));
        }
        Ok(r)
    }

    fn myopic_return(&self, r: &[f64]) -> f64 {
        let l = r.len();
        let g = self.config.myopic_gamma;
        r.iter()
            .enumerate()
            .map(|(t, x)| {
                let power = match self.config.myopic_direction {
                    MyopicDirection::EndWeighted => l - 1 - t,
                    MyopicDirection::StartWeighted => t,
                };
                g.powi(power as i32) * x
            })
            .sum()
    }

    /// Labels `(σ¹, σ²)`. `recent_return_average` feeds the equal
    /// teacher's threshold and is ignored by the other strategies.
    pub fn label(&mut self, s1: &Segment, s2: &Segment, recent_return_average: f64) -> Result<LabelOutcome> {
        let r1 = Self::rewards(s1, 1)?;
        let r2 = Self::rewards(s2, 2)?;
        let (ret1, ret2): (f64, f64) = (r1.iter().sum(), r2.iter().sum());
        let oracle = compare(ret1, ret2);
        Ok(match self.config.strategy {
            Strategy::Oracle => oracle,
            Strategy::Skip => {
                if self.rng.random_bool(self.config.skip_rate) {
                    LabelOutcome::Discard
                } else {
                    oracle
                }
            }
            Strategy::Myopic => compare(self.myopic_return(&r1), self.myopic_return(&r2)),
            Strategy::Equal => {
                let threshold = self.config.equal_threshold_pct * recent_return_average.abs();
                if (ret1 - ret2).abs() < threshold {
                    LabelOutcome::Equal
                } else {
                    oracle
                }
            }
            Strategy::Mistake => {
                if self.rng.random_bool(self.config.mistake_rate) {
                    oracle.flipped()
                } else {
                    oracle
                }
            }
            Strategy::Noisy => {
                if ret1 == ret2 {
                    LabelOutcome::Equal
                } else {
                    let b = self.config.noisy_beta;
                    let p1 = crate::rewardnet::bradley_terry(b * ret1, b * ret2);
                    if self.rng.random::<f64>() < p1 {
                        LabelOutcome::Prefer1
                    } else {
                        LabelOutcome::Prefer2
                    }
                }
            }
        })
    }
}

/// Average true episode return over the episodes finished within the
/// last `window` policy steps.
#[derive(Clone, Debug)]
pub struct RecentReturnTracker {
    window: usize,
    recent: VecDeque<(usize, f64)>,
    total: f64,
    count: usize,
}

impl RecentReturnTracker {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            recent: VecDeque::new(),
            total: 0.0,
            count: 0,
        }
    }

    /// Records an episode that finished at policy step `step`.
    pub fn update(&mut self, step: usize, episode_return: f64) {
        self.recent.push_back((step, episode_return));
        self.total += episode_return;
        self.count += 1;
    }

    /// Mean over the window ending at `now`, falling back to the
    /// all-time mean, then to `None` when nothing was recorded.
    pub fn average(&mut self, now: usize) -> Option<f64> {
        while let Some(&(s, _)) = self.recent.front() {
            if s + self.window <= now {
                self.recent.pop_front();
            } else {
                break;
            }
        }
        if !self.recent.is_empty() {
            Some(self.recent.iter().map(|(_, r)| r).sum::<f64>() / self.recent.len() as f64)
        } else if self.count > 0 {
            Some(self.total / self.count as f64)
        } else {
            None
        }
    }
}
