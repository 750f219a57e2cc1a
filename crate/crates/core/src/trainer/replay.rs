//! FIFO transition buffer for the one-step TD baseline.

use std::collections::VecDeque;

use rand::Rng;

use crate::policy::Observation;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub tokens: Vec<usize>,
    pub reward: f64,
    pub done: bool,
    pub next_obs: Observation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, t: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, rng: &mut impl Rng, n: usize) -> Vec<usize> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.gen_range(0..self.entries.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, EnvSpec};

    fn tr(env: &mut Env, seed: u64, r: f64) -> Transition {
        let o = env.reset(seed).unwrap();
        Transition {
            obs: o.clone(),
            tokens: vec![0],
            reward: r,
            done: false,
            next_obs: o,
        }
    }

    #[test]
    fn fifo_fill() {
        let mut env = Env::new(EnvSpec::hallway(8)).unwrap();
        let mut b = ReplayBuffer::new(10_000);
        for u in 0..40 {
            for i in 0..256 {
                b.push(tr(&mut env, 0, (u * 256 + i) as f64));
            }
        }
        assert_eq!(b.len(), 10_000);
        assert_eq!(b.get(0).reward, (40 * 256 - 10_000) as f64);
    }

    #[test]
    fn capacity_equal_to_rollout_holds_only_latest() {
        let mut env = Env::new(EnvSpec::hallway(8)).unwrap();
        let mut b = ReplayBuffer::new(4);
        for i in 0..8 {
            b.push(tr(&mut env, 0, i as f64));
        }
        let rs: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(rs, vec![4.0, 5.0, 6.0, 7.0]);
    }
}
