use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tasks::Visibility;
use crate::world::DiscreteAction;

/// A neighbor recorded with a transition, with its visibility before and
/// after the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborMask {
    pub agent: usize,
    pub pre: Visibility,
    pub post: Visibility,
}

/// One agent's step. `team_neighbors` includes the agent itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub agent: usize,
    pub obs: Vec<f64>,
    pub action: DiscreteAction,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub team_neighbors: Vec<NeighborMask>,
    pub adv_neighbors: Vec<NeighborMask>,
}

impl Transition {
    /// Copy with a new reward and without neighbor snapshots, as stored in
    /// the re-scored buffer.
    pub fn rescored(&self, reward: f64) -> Self {
        Self {
            agent: self.agent,
            obs: self.obs.clone(),
            action: self.action,
            reward,
            next_obs: self.next_obs.clone(),
            done: self.done,
            team_neighbors: Vec::new(),
            adv_neighbors: Vec::new(),
        }
    }
}

/// FIFO ring buffer; the oldest entry is evicted once `capacity` is reached.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    /// `n` distinct entries drawn uniformly (all of them if fewer).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        let n = n.min(self.items.len());
        index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }

    /// `n` entries drawn uniformly with replacement.
    pub fn sample_with_replacement<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}
