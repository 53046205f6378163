//! Append-only event log and the metrics computed from it.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Event names written to the `event` column.
pub mod event {
    pub const EPISODE_RETURN: &str = "episode_return";
    pub const EVAL_RETURN: &str = "eval_return";
    pub const PRETRAIN_DONE: &str = "pretrain_done";
    pub const REED_LOSS: &str = "reed_loss";
    pub const REED_COLLAPSE: &str = "reed_collapse";
    pub const QUERY_SELECTED: &str = "query_selected";
    pub const LABEL: &str = "label";
    pub const PREF_LOSS: &str = "pref_loss";
    pub const PREF_ACCURACY: &str = "pref_accuracy";
    pub const RELABEL: &str = "relabel";
    pub const REWARD_VARIANCE: &str = "reward_variance";
    pub const SESSION_END: &str = "session_end";
    pub const SAC_LOSS: &str = "sac_critic_loss";
}

/// One row of the long-format CSV `step,episode,event,value,aux`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub episode: u64,
    pub event: String,
    pub value: f64,
    pub aux: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    events: Vec<Event>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an event; steps may repeat but never go backwards.
    pub fn push(&mut self, step: u64, episode: u64, event: &str, value: f64, aux: impl Into<String>) {
        if let Some(last) = self.events.last() {
            assert!(
                step >= last.step,
                "event `{event}` at step {step} after step {}",
                last.step
            );
        }
        self.events.push(Event {
            step,
            episode,
            event: event.to_string(),
            value,
            aux: aux.into(),
        });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.event == name)
    }

    pub fn count(&self, name: &str) -> usize {
        self.of_kind(name).count()
    }

    /// Returns of episodes collected after exploration pretraining.
    pub fn training_returns(&self) -> Vec<&Event> {
        self.of_kind(event::EPISODE_RETURN)
            .filter(|e| e.aux == "train")
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.events {
            out.serialize(e)?;
        }
        out.flush().map_err(|e| HarnessError::Log(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut log = Self::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let e: Event = row?;
            if log.events.last().is_some_and(|l| e.step < l.step) {
                return Err(HarnessError::Log(format!("step {} goes backwards", e.step)));
            }
            log.events.push(e);
        }
        Ok(log)
    }
}

/// Mean of per-episode ratios `learned / ground truth` over the shared
/// episode grid; denominators are floored at 1e-6.
pub fn normalized_returns(learned: &MetricsLog, ground_truth: &MetricsLog) -> Result<f64> {
    let (a, b) = (learned.training_returns(), ground_truth.training_returns());
    if a.len() != b.len() || a.is_empty() {
        return Err(HarnessError::GridMismatch(format!(
            "{} learned episodes vs {} ground-truth episodes",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        if x.step != y.step || x.episode != y.episode {
            return Err(HarnessError::GridMismatch(format!(
                "episode {} ends at step {} vs episode {} at step {}",
                x.episode, x.step, y.episode, y.step
            )));
        }
        total += x.value / y.value.max(1e-6);
    }
    Ok(total / a.len() as f64)
}

/// Mean of the final evaluation returns, or of the last tenth of the
/// training returns when no evaluation was logged.
pub fn final_return(log: &MetricsLog) -> Option<f64> {
    let eval: Vec<f64> = log.of_kind(event::EVAL_RETURN).map(|e| e.value).collect();
    let xs = if eval.is_empty() {
        let train: Vec<f64> = log.training_returns().iter().map(|e| e.value).collect();
        let n = (train.len() / 10).max(1).min(train.len());
        train[train.len() - n..].to_vec()
    } else {
        eval
    };
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Predicted rewards for consecutive transitions, the first of which
/// has the global insertion index `first_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub first_id: u64,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    /// Reward-model updates seen so far.
    pub updates: usize,
    /// Mean over transitions of the across-update variance.
    pub mean: f64,
    pub sd: f64,
    /// Transitions with at least two predictions.
    pub transitions: usize,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Population variance of each transition's prediction across the
/// snapshots seen so far, summarised after every snapshot from the
/// second on over the transitions still in the latest one. Transitions
/// need two predictions to count.
pub fn reward_stability(snapshots: &[Snapshot]) -> Vec<StabilityPoint> {
    (2..=snapshots.len())
        .map(|upto| {
            let seen = &snapshots[..upto];
            let now = &seen[upto - 1];
            let (lo, hi) = (now.first_id, now.first_id + now.rewards.len() as u64);
            let variances: Vec<f64> = (lo..hi)
                .filter_map(|id| {
                    let vals: Vec<f64> = seen
                        .iter()
                        .filter(|s| id >= s.first_id && id < s.first_id + s.rewards.len() as u64)
                        .map(|s| s.rewards[(id - s.first_id) as usize])
                        .collect();
                    (vals.len() >= 2).then(|| mean_sd(&vals).1.powi(2))
                })
                .collect();
            let (mean, sd) = mean_sd(&variances);
            StabilityPoint {
                updates: upto,
                mean,
                sd,
                transitions: variances.len(),
            }
        })
        .collect()
}

/// Streaming form of [`reward_stability`] keeping Welford sums per
/// transition instead of every snapshot.
#[derive(Clone, Debug, Default)]
pub struct StabilityTracker {
    first_id: u64,
    stats: Vec<(u32, f64, f64)>,
    updates: usize,
}

impl StabilityTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one snapshot; returns the summary once two exist.
    pub fn record(&mut self, snap: &Snapshot) -> Option<StabilityPoint> {
        if self.stats.is_empty() {
            self.first_id = snap.first_id;
        }
        // Drop transitions that left the buffer for good.
        if snap.first_id > self.first_id {
            let gone = ((snap.first_id - self.first_id) as usize).min(self.stats.len());
            self.stats.drain(..gone);
            self.first_id = snap.first_id;
        }
        let end = (snap.first_id - self.first_id) as usize + snap.rewards.len();
        if self.stats.len() < end {
            self.stats.resize(end, (0, 0.0, 0.0));
        }
        let offset = (snap.first_id - self.first_id) as usize;
        for (slot, &r) in self.stats[offset..end].iter_mut().zip(&snap.rewards) {
            let (n, mean, m2) = slot;
            *n += 1;
            let delta = r - *mean;
            *mean += delta / *n as f64;
            *m2 += delta * (r - *mean);
        }
        self.updates += 1;
        if self.updates < 2 {
            return None;
        }
        let variances: Vec<f64> = self
            .stats
            .iter()
            .filter(|(n, _, _)| *n >= 2)
            .map(|(n, _, m2)| m2 / *n as f64)
            .collect();
        let (mean, sd) = mean_sd(&variances);
        Some(StabilityPoint {
            updates: self.updates,
            mean,
            sd,
            transitions: variances.len(),
        })
    }
}

/// Mean-over-runs learning curve: the `i`-th training episode of every
/// run averaged, truncated to the shortest run.
pub fn aggregate_curves(logs: &[MetricsLog]) -> Vec<(f64, f64)> {
    let curves: Vec<Vec<&Event>> = logs.iter().map(MetricsLog::training_returns).collect();
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let k = curves.len() as f64;
            let step = curves.iter().map(|c| c[i].step as f64).sum::<f64>() / k;
            let value = curves.iter().map(|c| c[i].value).sum::<f64>() / k;
            (step, value)
        })
        .collect()
}
