//! Uniform replay of transitions and storage of the freshest episode batch.

use rand::Rng;

use crate::envs::JointTransition;
use crate::error::{Error, Result};

/// Fixed-capacity FIFO ring with uniform sampling with replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T = JointTransition> {
    capacity: usize,
    ring: Vec<T>,
    write_head: usize,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            ring: Vec::with_capacity(capacity.min(1 << 16)),
            write_head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn len(&self) -> usize {
        self.ring.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.ring.len() < self.capacity {
            self.ring.push(item);
        } else {
            self.ring[self.write_head] = item;
        }
        self.write_head = (self.write_head + 1) % self.capacity;
    }

    /// `k` independent uniform draws.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<T>> {
        if self.ring.is_empty() {
            return Err(Error::Empty);
        }
        Ok((0..k)
            .map(|_| self.ring[rng.random_range(0..self.ring.len())].clone())
            .collect())
    }

    /// Contents oldest first.
    pub fn contents(&self) -> Vec<T> {
        if self.ring.len() < self.capacity {
            return self.ring.clone();
        }
        let mut out = self.ring[self.write_head..].to_vec();
        out.extend_from_slice(&self.ring[..self.write_head]);
        out
    }
}

/// Time-ordered record of one episode; every sequence is indexed by step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    /// `observations[t][agent]`
    pub observations: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<usize>>,
    /// Outgoing messages `messages[t][agent]`.
    pub messages: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub dones: Vec<bool>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.dones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dones.is_empty()
    }

    /// True when all per-step sequences agree in length.
    pub fn is_consistent(&self) -> bool {
        let t = self.dones.len();
        self.observations.len() == t
            && self.actions.len() == t
            && self.messages.len() == t
            && self.rewards.len() == t
    }
}

/// Keeps only the most recent batch of episodes.
#[derive(Clone, Debug, Default)]
pub struct EpisodeStore {
    latest: Vec<EpisodeTrace>,
    generation: u64,
}

impl EpisodeStore {
    pub fn replace(&mut self, batch: Vec<EpisodeTrace>) {
        self.latest = batch;
        self.generation += 1;
    }

    pub fn latest(&self) -> &[EpisodeTrace] {
        &self.latest
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}
