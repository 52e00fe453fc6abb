//! Ring-buffer replay storage.
//!
//! Each slot keeps the ground-truth reward and the current relabeled reward
//! side by side. Only [`ReplayBuffer::set_relabeled`] writes the relabeled
//! column, and it replaces the whole column at once.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
    next_obs: Vec<f64>,
    true_reward: Vec<f64>,
    relabeled: Vec<f64>,
    done: Vec<bool>,
    episode: Vec<u64>,
    step: Vec<usize>,
    len: usize,
    head: usize,
}

/// Which reward column a minibatch reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardColumn {
    Relabeled,
    GroundTruth,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_obs: Array2<f64>,
    pub rewards: Array1<f64>,
    /// 1.0 where the transition ended in a true terminal state. Fixed-horizon
    /// episodes never terminate, so this is all zeros for the bundled envs.
    pub terminal: Array1<f64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            obs_dim,
            act_dim,
            obs: vec![0.0; capacity * obs_dim],
            actions: vec![0.0; capacity * act_dim],
            next_obs: vec![0.0; capacity * obs_dim],
            true_reward: vec![0.0; capacity],
            relabeled: vec![0.0; capacity],
            done: vec![false; capacity],
            episode: vec![0; capacity],
            step: vec![0; capacity],
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Physical slot of logical index `i` (0 = oldest).
    fn slot(&self, i: usize) -> usize {
        (self.head + self.capacity - self.len + i) % self.capacity
    }

    /// Store a transition from episode `episode`. The relabeled reward starts
    /// out equal to `relabeled`.
    pub fn push(&mut self, tr: &Transition, episode: u64, relabeled: f64) {
        debug_assert_eq!(tr.state.len(), self.obs_dim);
        debug_assert_eq!(tr.action.len(), self.act_dim);
        let s = self.head;
        let (od, ad) = (self.obs_dim, self.act_dim);
        self.obs[s * od..(s + 1) * od].copy_from_slice(&tr.state);
        self.next_obs[s * od..(s + 1) * od].copy_from_slice(&tr.next_state);
        self.actions[s * ad..(s + 1) * ad].copy_from_slice(&tr.action);
        self.true_reward[s] = tr.reward;
        self.relabeled[s] = relabeled;
        self.done[s] = tr.done;
        self.episode[s] = episode;
        self.step[s] = tr.step;
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    pub fn obs(&self, i: usize) -> &[f64] {
        let s = self.slot(i);
        &self.obs[s * self.obs_dim..(s + 1) * self.obs_dim]
    }

    pub fn next_obs(&self, i: usize) -> &[f64] {
        let s = self.slot(i);
        &self.next_obs[s * self.obs_dim..(s + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        let s = self.slot(i);
        &self.actions[s * self.act_dim..(s + 1) * self.act_dim]
    }

    pub fn true_reward(&self, i: usize) -> f64 {
        self.true_reward[self.slot(i)]
    }

    pub fn relabeled_reward(&self, i: usize) -> f64 {
        self.relabeled[self.slot(i)]
    }

    pub fn episode(&self, i: usize) -> u64 {
        self.episode[self.slot(i)]
    }

    pub fn step_index(&self, i: usize) -> usize {
        self.step[self.slot(i)]
    }

    pub fn done(&self, i: usize) -> bool {
        self.done[self.slot(i)]
    }

    /// Logical index of the transition at `(episode, step)`, if still stored.
    pub fn find(&self, episode: u64, step: usize) -> Option<usize> {
        (0..self.len).find(|&i| self.episode(i) == episode && self.step_index(i) == step)
    }

    /// Concatenated `(state, action)` rows for logical indices `start..start + count`.
    pub fn state_action_rows(&self, start: usize, count: usize) -> Array2<f64> {
        let w = self.obs_dim + self.act_dim;
        let mut out = Array2::zeros((count, w));
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let i = start + r;
            for (dst, &v) in row.iter_mut().zip(self.obs(i).iter().chain(self.action(i))) {
                *dst = v;
            }
        }
        out
    }

    /// Logical start indices `i` such that `i..i+k` lie in one episode with
    /// consecutive step indices.
    pub fn segment_starts(&self, k: usize) -> Vec<usize> {
        if k == 0 || self.len < k {
            return Vec::new();
        }
        // run[i] = length of the consecutive in-episode run ending at i
        let mut run = vec![0usize; self.len];
        for i in 0..self.len {
            run[i] = if i > 0
                && self.episode(i) == self.episode(i - 1)
                && self.step_index(i) == self.step_index(i - 1) + 1
            {
                run[i - 1] + 1
            } else {
                1
            };
        }
        (0..=self.len - k).filter(|&i| run[i + k - 1] >= k).collect()
    }

    pub fn sample_indices(&self, batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::InsufficientData("replay buffer is empty".into()));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.len)).collect())
    }

    pub fn batch(&self, indices: &[usize], column: RewardColumn) -> Batch {
        let n = indices.len();
        let mut obs = Array2::zeros((n, self.obs_dim));
        let mut next_obs = Array2::zeros((n, self.obs_dim));
        let mut actions = Array2::zeros((n, self.act_dim));
        let mut rewards = Array1::zeros(n);
        for (r, &i) in indices.iter().enumerate() {
            obs.row_mut(r).assign(&ndarray::aview1(self.obs(i)));
            next_obs.row_mut(r).assign(&ndarray::aview1(self.next_obs(i)));
            actions.row_mut(r).assign(&ndarray::aview1(self.action(i)));
            rewards[r] = match column {
                RewardColumn::Relabeled => self.relabeled_reward(i),
                RewardColumn::GroundTruth => self.true_reward(i),
            };
        }
        Batch {
            obs,
            actions,
            next_obs,
            rewards,
            terminal: Array1::zeros(n),
        }
    }

    /// All stored observations, oldest first.
    pub fn all_obs(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len, self.obs_dim));
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&ndarray::aview1(self.obs(r)));
        }
        out
    }

    /// Replace the relabeled column. `values[i]` belongs to logical index `i`.
    pub fn set_relabeled(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len {
            return Err(Error::shape("relabeled rewards", self.len, values.len()));
        }
        let mut column = self.relabeled.clone();
        for (i, &v) in values.iter().enumerate() {
            column[self.slot(i)] = v;
        }
        self.relabeled = column;
        Ok(())
    }

    pub fn relabeled_column(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.relabeled_reward(i)).collect()
    }

    pub fn true_reward_column(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.true_reward(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(step: usize, v: f64) -> Transition {
        Transition {
            state: vec![v, v + 0.5],
            action: vec![-v],
            next_state: vec![v + 1.0, v + 1.5],
            reward: v * 10.0,
            done: false,
            step,
        }
    }

    #[test]
    fn ring_eviction_is_fifo() {
        let mut b = ReplayBuffer::new(3, 2, 1);
        for i in 0..5 {
            b.push(&tr(i, i as f64), 0, 0.0);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.obs(0), &[2.0, 2.5]);
        assert_eq!(b.true_reward(2), 40.0);
        assert_eq!(b.step_index(0), 2);
    }

    #[test]
    fn segment_windows() {
        let mut b = ReplayBuffer::new(1000, 2, 1);
        for ep in 0..3u64 {
            for s in 0..200 {
                b.push(&tr(s, s as f64), ep, 0.0);
            }
        }
        let starts = b.segment_starts(50);
        assert_eq!(starts.len(), 3 * 151);
        assert!(b.segment_starts(201).is_empty());
        for &i in &starts {
            assert_eq!(b.episode(i), b.episode(i + 49));
        }
    }

    #[test]
    fn segment_windows_after_wraparound() {
        let mut b = ReplayBuffer::new(250, 2, 1);
        for ep in 0..2u64 {
            for s in 0..200 {
                b.push(&tr(s, s as f64), ep, 0.0);
            }
        }
        // oldest 150 of episode 0 evicted: 50 remain (1 window) + 151 windows in episode 1
        assert_eq!(b.segment_starts(50).len(), 1 + 151);
    }

    #[test]
    fn relabel_column_replacement() {
        let mut b = ReplayBuffer::new(4, 2, 1);
        for i in 0..6 {
            b.push(&tr(i, i as f64), 0, 0.0);
        }
        let truth = b.true_reward_column();
        b.set_relabeled(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(b.relabeled_column(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.true_reward_column(), truth);
        assert!(b.set_relabeled(&[1.0]).is_err());
        let batch = b.batch(&[0, 3], RewardColumn::Relabeled);
        assert_eq!(batch.rewards.to_vec(), vec![1.0, 4.0]);
        let batch = b.batch(&[0, 3], RewardColumn::GroundTruth);
        assert_eq!(batch.rewards.to_vec(), vec![20.0, 50.0]);
        assert_eq!(b.state_action_rows(1, 2).row(1).to_vec(), vec![4.0, 4.5, -4.0]);
    }
}
