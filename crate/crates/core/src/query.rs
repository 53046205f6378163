//! Disagreement-based query selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{ReplayBuffer, Segment};
use crate::error::{CoreError, Result};
use crate::rewardnet::RewardEnsemble;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub sigma1: Segment,
    pub sigma2: Segment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    /// Position in the candidate list.
    pub index: usize,
    pub pair: CandidatePair,
    /// Population variance of the member preference probabilities.
    pub score: f64,
}

pub type QueryBatch = Vec<ScoredPair>;

/// `n` pairs of length-`l` windows, each window uniform over all valid
/// (episode, offset) positions. Windows may overlap.
pub fn sample_candidates<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    n: usize,
    l: usize,
    rng: &mut R,
) -> Result<Vec<CandidatePair>> {
    let starts = buffer.segment_starts(l);
    if starts.is_empty() {
        return Err(CoreError::NoFullSegment { len: l });
    }
    let mut pick = || buffer.segment(starts[rng.random_range(0..starts.len())], l);
    Ok((0..n)
        .map(|_| CandidatePair {
            sigma1: pick(),
            sigma2: pick(),
        })
        .collect())
}

pub fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Indices of the `m` highest scores; equal scores keep index order.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(m);
    order
}

/// Scores each candidate from `member_probs[member][pair]` and returns
/// the chosen indices with their scores.
pub fn select_top_by_variance(member_probs: &[Vec<f64>], m: usize) -> Vec<(usize, f64)> {
    let n = member_probs.first().map_or(0, Vec::len);
    let scores: Vec<f64> = (0..n)
        .map(|j| {
            let ps: Vec<f64> = member_probs.iter().map(|row| row[j]).collect();
            population_variance(&ps)
        })
        .collect();
    top_m(&scores, m).into_iter().map(|i| (i, scores[i])).collect()
}

/// The `m` candidates whose preference probabilities vary most across
/// the ensemble.
pub fn disagreement_select(
    ensemble: &RewardEnsemble,
    candidates: Vec<CandidatePair>,
    m: usize,
) -> Result<QueryBatch> {
    if m > candidates.len() {
        return Err(CoreError::InvalidConfig(format!(
            "cannot select {m} queries from {} candidates",
            candidates.len()
        )));
    }
    let pairs: Vec<_> = candidates.iter().map(|c| (&c.sigma1, &c.sigma2)).collect();
    let probs = ensemble.member_probabilities(&pairs)?;
    let chosen = select_top_by_variance(&probs, m);
    let mut slots: Vec<Option<CandidatePair>> = candidates.into_iter().map(Some).collect();
    Ok(chosen
        .into_iter()
        .map(|(index, score)| ScoredPair {
            index,
            pair: slots[index].take().expect("indices are distinct"),
            score,
        })
        .collect())
}
