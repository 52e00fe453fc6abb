//! The RL half: SAC with sparse input layers, replay storage, relabeling
//! with a learned reward, and unsupervised state-entropy pretraining.

mod replay;
mod sac;

pub use replay::{Batch, ReplayBuffer, RewardColumn};
pub use sac::{PolicySample, RlTopologyEvent, SacAgent, SacConfig, SacLosses};

use ndarray::{s, Array1};
use rand::Rng as _;

use crate::envs::{Env, Transition};
use crate::error::{Error, Result};
use crate::preference::{RewardEnsemble, RuneSchedule};
use crate::rng::{self, Rng};

/// Steps an environment, resetting it at the horizon with per-episode seeds.
#[derive(Debug)]
pub struct Collector<E> {
    env: E,
    seed: u64,
    obs: Vec<f64>,
    episode: u64,
    episode_return: f64,
    finished_returns: Vec<f64>,
}

impl<E: Env> Collector<E> {
    pub fn new(mut env: E, seed: u64) -> Self {
        let obs = env.reset(rng::derive_seed(seed, "episode", 0));
        Collector {
            env,
            seed,
            obs,
            episode: 0,
            episode_return: 0.0,
            finished_returns: Vec::new(),
        }
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    /// Ground-truth returns of completed training episodes.
    pub fn finished_returns(&self) -> &[f64] {
        &self.finished_returns
    }

    /// Take one step; returns the transition and the episode it belongs to.
    pub fn step(&mut self, action: &[f64]) -> (Transition, u64) {
        let tr = self.env.step(action);
        let ep = self.episode;
        self.episode_return += tr.reward;
        if tr.done {
            self.finished_returns.push(self.episode_return);
            self.episode_return = 0.0;
            self.episode += 1;
            self.obs = self.env.reset(rng::derive_seed(self.seed, "episode", self.episode));
        } else {
            self.obs.clone_from(&tr.next_state);
        }
        (tr, ep)
    }
}

/// Uniform random action in the symmetric action box.
pub fn random_action(act_dim: usize, bound: f64, rng: &mut Rng) -> Vec<f64> {
    (0..act_dim).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Intrinsic reward `log(d_k + 1e-6)` where `d_k` is the distance from each
/// query state to its `k`-th nearest neighbor in a pool of up to `pool`
/// states drawn uniformly from `replay`.
pub fn knn_intrinsic_rewards(
    replay: &ReplayBuffer,
    queries: &ndarray::Array2<f64>,
    k: usize,
    pool: usize,
    rng: &mut Rng,
) -> Result<Array1<f64>> {
    if replay.is_empty() {
        return Err(Error::InsufficientData("replay buffer is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("k-NN rank must be >= 1".into()));
    }
    let idx = replay.sample_indices(pool.min(replay.len()).max(1), rng)?;
    let d = replay.obs_dim();
    let mut pool_rows = Vec::with_capacity(idx.len() * d);
    for &i in &idx {
        pool_rows.extend_from_slice(replay.obs(i));
    }
    let mut dists = vec![0.0; idx.len()];
    let rank = k.min(idx.len()) - 1;
    Ok(Array1::from_shape_fn(queries.nrows(), |q| {
        let row = queries.slice(s![q, ..]);
        for (j, dist) in dists.iter_mut().enumerate() {
            let p = &pool_rows[j * d..(j + 1) * d];
            *dist = row.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let (_, kth, _) = dists.select_nth_unstable_by(rank, f64::total_cmp);
        (kth.sqrt() + 1e-6).ln()
    }))
}

/// Rewrite every stored transition's relabeled reward with the ensemble
/// mean, plus `beta_t * std` when a RUNE schedule and step are given.
pub fn relabel_replay(
    replay: &mut ReplayBuffer,
    ensemble: &RewardEnsemble,
    rune: Option<(&RuneSchedule, u64)>,
) -> Result<()> {
    if !ensemble.is_trained() {
        return Err(Error::InsufficientData("reward ensemble has not been trained".into()));
    }
    const CHUNK: usize = 4096;
    let mut values = Vec::with_capacity(replay.len());
    let mut start = 0;
    while start < replay.len() {
        let n = CHUNK.min(replay.len() - start);
        let x = replay.state_action_rows(start, n);
        let (mean, std) = ensemble.infer(x.view())?;
        match rune {
            Some((sched, t)) => {
                let beta = sched.beta(t);
                values.extend(mean.iter().zip(&std).map(|(m, s)| m + beta * s));
            }
            None => values.extend(mean.iter()),
        }
        start += n;
    }
    replay.set_relabeled(&values)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub steps: u64,
    pub updates: u64,
    pub topology_events: Vec<RlTopologyEvent>,
}

/// Run `steps` environment steps of SAC on the k-NN state-entropy reward.
/// Transitions are stored with their ground-truth reward and a relabeled
/// reward of 0. Updates start once the buffer holds a full batch.
pub fn unsup_pretrain<E: Env>(
    agent: &mut SacAgent,
    collector: &mut Collector<E>,
    replay: &mut ReplayBuffer,
    steps: u64,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    let mut report = PretrainReport::default();
    for _ in 0..steps {
        let obs = collector.obs().to_vec();
        let action = agent.act(&obs, false)?;
        let (tr, ep) = collector.step(&action);
        replay.push(&tr, ep, 0.0);
        report.steps += 1;
        if replay.len() >= agent.cfg.batch_size {
            let idx = replay.sample_indices(agent.cfg.batch_size, rng)?;
            let mut batch = replay.batch(&idx, RewardColumn::Relabeled);
            batch.rewards = knn_intrinsic_rewards(replay, &batch.obs, 5, 512, rng)?;
            agent.update(&batch)?;
            report.updates += 1;
            if agent.topology_due() {
                report.topology_events.push(agent.rl_topology_update()?);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dst::DstConfig;
    use crate::envs::Pendulum;
    use crate::preference::RewardModelConfig;
    use ndarray::Array2;

    fn filled_replay(n: usize) -> ReplayBuffer {
        let mut c = Collector::new(Pendulum::new(), 1);
        let mut r = ReplayBuffer::new(10_000, 3, 1);
        let mut ar = rng::stream(1, "a", 0);
        for _ in 0..n {
            let a = random_action(1, 2.0, &mut ar);
            let (tr, ep) = c.step(&a);
            r.push(&tr, ep, 0.0);
        }
        r
    }

    #[test]
    fn knn_floor_on_duplicates() {
        let mut r = ReplayBuffer::new(10, 2, 1);
        for s in 0..10 {
            r.push(
                &Transition {
                    state: vec![1.0, 1.0],
                    action: vec![0.0],
                    next_state: vec![1.0, 1.0],
                    reward: 0.0,
                    done: false,
                    step: s,
                },
                0,
                0.0,
            );
        }
        let q = Array2::from_elem((3, 2), 1.0);
        let v = knn_intrinsic_rewards(&r, &q, 5, 512, &mut rng::stream(0, "k", 0)).unwrap();
        for x in v {
            assert_eq!(x, (1e-6f64).ln());
        }
    }

    #[test]
    fn relabel_is_idempotent_and_isolated() {
        let mut r = filled_replay(300);
        let truth = r.true_reward_column();
        let obs = r.all_obs();
        let mut ens = RewardEnsemble::new(4, &RewardModelConfig { hidden: vec![8], ..Default::default() }, &DstConfig::default(), 0)
            .unwrap();
        assert!(relabel_replay(&mut r, &ens, None).is_err());
        let mut ds = crate::preference::PreferenceDataset::new(100);
        let mut sr = rng::stream(0, "seg", 0);
        for (a, b) in crate::preference::sample_segment_pairs(&r, 10, 20, &mut sr).unwrap() {
            let label = crate::preference::teacher_label(&a, &b);
            ds.push(crate::preference::PreferencePair { first: a, second: b, label });
        }
        ens.train(&ds, 2, 8).unwrap();
        relabel_replay(&mut r, &ens, None).unwrap();
        let first = r.relabeled_column();
        relabel_replay(&mut r, &ens, None).unwrap();
        assert_eq!(first, r.relabeled_column());
        assert_eq!(truth, r.true_reward_column());
        assert_eq!(obs, r.all_obs());

        // constant-zero model
        for m in ens.members_mut() {
            for l in m.net.layers_mut() {
                l.weights.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        relabel_replay(&mut r, &ens, Some((&RuneSchedule::default(), 0))).unwrap();
        assert!(r.relabeled_column().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_step_pretrain_is_a_no_op() {
        let cfg = SacConfig {
            hidden: vec![8],
            batch_size: 16,
            ..Default::default()
        };
        let mut agent = SacAgent::new(3, 1, 2.0, &cfg, &DstConfig::default(), 0).unwrap();
        let before = agent.to_json().unwrap();
        let mut c = Collector::new(Pendulum::new(), 0);
        let mut r = ReplayBuffer::new(100, 3, 1);
        let rep = unsup_pretrain(&mut agent, &mut c, &mut r, 0, &mut rng::stream(0, "p", 0)).unwrap();
        assert_eq!(rep.steps, 0);
        assert!(r.is_empty());
        assert_eq!(before, agent.to_json().unwrap());
    }

    #[test]
    fn collector_resets_at_horizon() {
        let mut c = Collector::new(Pendulum::new(), 2);
        for _ in 0..450 {
            c.step(&[0.0]);
        }
        assert_eq!(c.episode(), 2);
        assert_eq!(c.finished_returns().len(), 2);
    }
}
