//! Transitions, the replay buffer and fixed-length segments.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward_true: f64,
    /// Current learned-reward estimate; rewritten on every relabel.
    pub reward_hat: f64,
    /// Step within the episode, starting at 0.
    pub step_index: usize,
    pub episode_id: u64,
}

/// FIFO ring buffer of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest transition once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    fn physical(&self, i: usize) -> usize {
        if self.items.len() < self.capacity {
            i
        } else {
            (self.cursor + i) % self.capacity
        }
    }

    /// The `i`-th oldest stored transition.
    pub fn get(&self, i: usize) -> &Transition {
        &self.items[self.physical(i)]
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        (0..self.items.len()).map(move |i| self.get(i))
    }

    /// Mutable access in storage order; used only by relabelling.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Transition> {
        self.items.iter_mut()
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.is_empty(), "cannot sample from an empty buffer");
        (0..batch)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect()
    }

    /// Uniform sample with replacement, returned by reference.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        self.sample_indices(batch, rng)
            .into_iter()
            .map(|i| self.get(i))
            .collect()
    }

    /// Whether logical positions `i..i+len` form one contiguous piece of
    /// a single episode.
    pub fn is_contiguous(&self, i: usize, len: usize) -> bool {
        if len == 0 || i + len > self.len() {
            return false;
        }
        let first = self.get(i);
        (1..len).all(|j| {
            let t = self.get(i + j);
            t.episode_id == first.episode_id && t.step_index == first.step_index + j
        })
    }

    /// Logical start positions of every valid length-`len` window.
    pub fn segment_starts(&self, len: usize) -> Vec<usize> {
        if len == 0 || self.len() < len {
            return Vec::new();
        }
        // run[i] = length of the contiguous run ending at i.
        let mut starts = Vec::new();
        let mut run = 0usize;
        for i in 0..self.len() {
            let t = self.get(i);
            let continues = i > 0 && {
                let p = self.get(i - 1);
                p.episode_id == t.episode_id && p.step_index + 1 == t.step_index
            };
            run = if continues { run + 1 } else { 1 };
            if run >= len {
                starts.push(i + 1 - len);
            }
        }
        starts
    }

    pub fn segment(&self, start: usize, len: usize) -> Segment {
        debug_assert!(self.is_contiguous(start, len));
        Segment {
            start,
            transitions: (start..start + len).map(|i| self.get(i).clone()).collect(),
        }
    }
}

/// Contiguous window of transitions from one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Logical buffer position of the first transition when sampled.
    pub start: usize,
    pub transitions: Vec<Transition>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn episode_id(&self) -> u64 {
        self.transitions[0].episode_id
    }

    pub fn true_rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward_true).collect()
    }

    pub fn true_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward_true).sum()
    }

    pub fn states(&self) -> Vec<&[f64]> {
        self.transitions.iter().map(|t| t.state.as_slice()).collect()
    }

    pub fn actions(&self) -> Vec<&[f64]> {
        self.transitions.iter().map(|t| t.action.as_slice()).collect()
    }
}

#[cfg(test)]
pub(crate) fn transition(episode_id: u64, step_index: usize, x: f64) -> Transition {
    Transition {
        state: vec![x],
        action: vec![0.0],
        next_state: vec![x + 1.0],
        reward_true: x,
        reward_hat: 0.0,
        step_index,
        episode_id,
    }
}
