//! Preference learning: segments, the simulated teacher, and the
//! Bradley–Terry reward ensemble trained with sparse input layers.
//!
//! A reward model scores a segment by summing its per-step outputs. For two
//! segments with summed scores `R0` and `R1`, the predicted probability that
//! the second is preferred is `logistic(R1 - R0)`, and training minimizes the
//! binary cross-entropy against the teacher's label. Everything is computed
//! from the score difference, which keeps the loss finite for any logit.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::ReplayBuffer;
use crate::dst::{self, DstConfig, DstRule, SparsityMask};
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamState, Network, LEAKY_SLOPE};
use crate::rng::{self, Rng};

/// `k` consecutive `(state, action)` rows from one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Shape `(k, state_dim + action_dim)`.
    pub inputs: Array2<f64>,
    /// Sum of ground-truth rewards; only the teacher reads it.
    pub true_return: f64,
    pub episode: u64,
    pub start_step: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Segment of length `k` starting at logical replay index `start`.
    pub fn from_replay(replay: &ReplayBuffer, start: usize, k: usize) -> Self {
        Segment {
            inputs: replay.state_action_rows(start, k),
            true_return: (start..start + k).map(|i| replay.true_reward(i)).sum(),
            episode: replay.episode(start),
            start_step: replay.step_index(start),
        }
    }
}

/// Teacher label `y`: the probability mass on the second segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// First segment preferred, `y = 0`.
    First,
    /// Second segment preferred, `y = 1`.
    Second,
    /// Equally preferred, `y = 0.5`.
    Equal,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::First => 0.0,
            Label::Second => 1.0,
            Label::Equal => 0.5,
        }
    }

    pub fn from_value(y: f64) -> Result<Self> {
        match y {
            y if y == 0.0 => Ok(Label::First),
            y if y == 1.0 => Ok(Label::Second),
            y if y == 0.5 => Ok(Label::Equal),
            _ => Err(Error::Config(format!("preference label must be 0, 0.5 or 1, got {y}"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::First => Label::Second,
            Label::Second => Label::First,
            Label::Equal => Label::Equal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub first: Segment,
    pub second: Segment,
    pub label: Label,
}

/// Draw `count` segment pairs with start points uniform over all valid
/// in-episode windows; the two segments of a pair are drawn independently.
pub fn sample_segment_pairs(
    replay: &ReplayBuffer,
    k: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<(Segment, Segment)>> {
    let starts = replay.segment_starts(k);
    if starts.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no episode in the replay buffer holds a window of length {k}"
        )));
    }
    let mut draw = || Segment::from_replay(replay, starts[rng.random_range(0..starts.len())], k);
    Ok((0..count).map(|_| (draw(), draw())).collect())
}

/// Simulated teacher: prefers the segment with the strictly larger
/// ground-truth return, `Equal` only on exact equality.
pub fn teacher_label(first: &Segment, second: &Segment) -> Label {
    if second.true_return > first.true_return {
        Label::Second
    } else if second.true_return < first.true_return {
        Label::First
    } else {
        Label::Equal
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of label `y` against `P = logistic(logit)`, with
/// `logit = R1 - R0`. Returns the loss and `dLoss/dlogit = P - y`.
pub fn ce_loss(logit: f64, y: f64) -> (f64, f64) {
    // -log P = softplus(-x), -log(1 - P) = softplus(x)
    let loss = y * softplus(-logit) + (1.0 - y) * softplus(logit);
    (loss, logistic(logit) - y)
}

/// Anything that maps `(state, action)` rows to per-row reward estimates.
pub trait RewardModel {
    fn rewards(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>>;
}

impl RewardModel for Network {
    fn rewards(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.predict(inputs)?.column(0).to_owned())
    }
}

/// `P(second ≻ first) = logistic(R1 - R0)` with `Ri` the summed per-step rewards.
pub fn predict_preference<M: RewardModel + ?Sized>(
    model: &M,
    first: &Segment,
    second: &Segment,
) -> Result<f64> {
    if first.len() != second.len() {
        return Err(Error::shape("segment length", first.len(), second.len()));
    }
    let r0 = model.rewards(first.inputs.view())?.sum();
    let r1 = model.rewards(second.inputs.view())?.sum();
    Ok(logistic(r1 - r0))
}

/// Bounded FIFO collection of labeled pairs.
#[derive(Debug, Clone)]
pub struct PreferenceDataset {
    pairs: VecDeque<PreferencePair>,
    capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PairRecord {
    episode0: u64,
    start0: usize,
    episode1: u64,
    start1: usize,
    k: usize,
    label: f64,
}

impl PreferenceDataset {
    pub fn new(capacity: usize) -> Self {
        PreferenceDataset {
            pairs: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, pair: PreferencePair) {
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(pair);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PreferencePair> {
        self.pairs.iter()
    }

    pub fn get(&self, i: usize) -> &PreferencePair {
        &self.pairs[i]
    }

    /// One JSON record per line: segment episode/start indices, length, label.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for p in &self.pairs {
            let rec = PairRecord {
                episode0: p.first.episode,
                start0: p.first.start_step,
                episode1: p.second.episode,
                start1: p.second.start_step,
                k: p.first.len(),
                label: p.label.value(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Rebuild a dataset from [`Self::to_jsonl`] output, reading segment
    /// contents back out of `replay`.
    pub fn from_jsonl(text: &str, replay: &ReplayBuffer, capacity: usize) -> Result<Self> {
        let mut ds = PreferenceDataset::new(capacity);
        let segment = |episode: u64, start: usize, k: usize| -> Result<Segment> {
            let i = replay.find(episode, start).ok_or_else(|| {
                Error::InsufficientData(format!(
                    "episode {episode} step {start} is no longer in the replay buffer"
                ))
            })?;
            if i + k > replay.len() || replay.episode(i + k - 1) != episode {
                return Err(Error::InsufficientData(format!(
                    "segment at episode {episode} step {start} is truncated"
                )));
            }
            Ok(Segment::from_replay(replay, i, k))
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: PairRecord = serde_json::from_str(line)?;
            ds.push(PreferencePair {
                first: segment(rec.episode0, rec.start0, rec.k)?,
                second: segment(rec.episode1, rec.start1, rec.k)?,
                label: Label::from_value(rec.label)?,
            });
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardModelConfig {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ensemble_size: usize,
    /// Maximum number of stored preference pairs.
    pub capacity: usize,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        RewardModelConfig {
            hidden: vec![64, 64],
            leaky_slope: LEAKY_SLOPE,
            lr: 0.003,
            batch_size: 128,
            epochs: 50,
            ensemble_size: 3,
            capacity: 100_000,
        }
    }
}

impl RewardModelConfig {
    /// Four hidden layers of 128 units.
    pub fn full() -> Self {
        RewardModelConfig {
            hidden: vec![128; 4],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "reward ensemble size and batch size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("reward learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RewardMember {
    pub net: Network,
    pub adam: AdamState,
    /// Gradient steps taken so far.
    pub steps: u64,
    shuffle_rng: Rng,
    dst_rng: Rng,
}

/// Recorded after each topology update of one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopologyEvent {
    pub member: usize,
    pub step: u64,
    pub active: usize,
    pub pruned: usize,
    pub grown: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy over the final epoch, per member.
    pub final_ce: Vec<f64>,
    pub gradient_steps: Vec<u64>,
    pub topology_events: Vec<TopologyEvent>,
}

#[derive(Debug, Clone)]
pub struct RewardEnsemble {
    members: Vec<RewardMember>,
    dst: DstConfig,
    cfg: RewardModelConfig,
    input_dim: usize,
    trained: bool,
}

impl RewardEnsemble {
    pub fn new(input_dim: usize, cfg: &RewardModelConfig, dst: &DstConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dst.rule != DstRule::Dense {
            dst.validate()?;
        }
        let mut widths = vec![input_dim];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let act = Activation::LeakyRelu {
            slope: cfg.leaky_slope,
        };
        let members = (0..cfg.ensemble_size as u64)
            .map(|i| {
                let mut net = Network::init(&widths, act, rng::derive_seed(seed, "reward-init", i))?;
                if dst.rule.is_masked() {
                    let (rows, cols) = net.input_layer().weights.dim();
                    let mask = SparsityMask::random(
                        rows,
                        cols,
                        dst.sparsity,
                        &mut rng::stream(seed, "reward-mask", i),
                    )?;
                    net.input_layer_mut().set_mask(mask)?;
                }
                let adam = AdamState::new(&net, cfg.lr);
                Ok(RewardMember {
                    net,
                    adam,
                    steps: 0,
                    shuffle_rng: rng::stream(seed, "reward-shuffle", i),
                    dst_rng: rng::stream(seed, "reward-dst", i),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RewardEnsemble {
            members,
            dst: dst.clone(),
            cfg: cfg.clone(),
            input_dim,
            trained: false,
        })
    }

    pub fn members(&self) -> &[RewardMember] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [RewardMember] {
        &mut self.members
    }

    pub fn dst(&self) -> &DstConfig {
        &self.dst
    }

    pub fn config(&self) -> &RewardModelConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Train every member for `epochs` passes over `data` in shuffled
    /// minibatches of `batch_size` pairs, running the configured topology
    /// rule every `update_period` gradient steps.
    pub fn train(&mut self, data: &PreferenceDataset, epochs: usize, batch_size: usize) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::InsufficientData("preference dataset is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let k = data.get(0).first.len();
        for p in data.pairs() {
            if p.first.len() != k || p.second.len() != k {
                return Err(Error::shape("segment length", k, p.first.len().max(p.second.len())));
            }
            if p.first.inputs.ncols() != self.input_dim || p.second.inputs.ncols() != self.input_dim {
                return Err(Error::shape("segment width", self.input_dim, p.first.inputs.ncols()));
            }
        }
        let dst = &self.dst;
        let results: Vec<Result<(f64, Vec<TopologyEvent>)>> = self
            .members
            .par_iter_mut()
            .enumerate()
            .map(|(mi, m)| train_member(mi, m, dst, data, epochs, batch_size))
            .collect();
        let mut report = TrainReport {
            final_ce: Vec::with_capacity(self.members.len()),
            gradient_steps: self.members.iter().map(|m| m.steps).collect(),
            topology_events: Vec::new(),
        };
        for r in results {
            let (ce, events) = r?;
            report.final_ce.push(ce);
            report.topology_events.extend(events);
        }
        self.trained = true;
        Ok(report)
    }

    /// Per-member predictions for `inputs`, shape `(members, rows)`.
    pub fn member_rewards(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.members.len(), inputs.nrows()));
        for (i, m) in self.members.iter().enumerate() {
            out.row_mut(i).assign(&self.member_predict(m, inputs)?);
        }
        Ok(out)
    }

    fn member_predict(&self, m: &RewardMember, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let out = if self.dst.rule == DstRule::DropConnect {
            let w = dst::dropconnect_eval_weights(&m.net.input_layer().weights, self.dst.dropconnect_p);
            m.net.predict_with(inputs, Some(&w))?
        } else {
            m.net.predict(inputs)?
        };
        Ok(out.column(0).to_owned())
    }

    /// Mean and population standard deviation across members, per row.
    pub fn infer(&self, inputs: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let all = self.member_rewards(inputs)?;
        let mean = all.mean_axis(Axis(0)).expect("ensemble is non-empty");
        let std = all.std_axis(Axis(0), 0.0);
        Ok((mean, std))
    }

    /// Ensemble estimate for a single `(state, action)`.
    pub fn reward_infer(&self, state: &[f64], action: &[f64]) -> Result<(f64, f64)> {
        let row: Vec<f64> = state.iter().chain(action).copied().collect();
        let x = Array2::from_shape_vec((1, row.len()), row).map_err(|e| Error::Config(e.to_string()))?;
        let (m, s) = self.infer(x.view())?;
        Ok((m[0], s[0]))
    }
}

impl RewardModel for RewardEnsemble {
    fn rewards(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.infer(inputs)?.0)
    }
}

fn train_member(
    index: usize,
    m: &mut RewardMember,
    dst: &DstConfig,
    data: &PreferenceDataset,
    epochs: usize,
    batch_size: usize,
) -> Result<(f64, Vec<TopologyEvent>)> {
    let n = data.len();
    let k = data.get(0).first.len();
    let width = data.get(0).first.inputs.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    let mut events = Vec::new();
    let mut last_epoch_ce = f64::NAN;
    for _ in 0..epochs {
        order.shuffle(&mut m.shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let b = chunk.len();
            // rows [2ik, 2ik + k) hold pair i's first segment, the next k its second
            let mut x = Array2::zeros((2 * b * k, width));
            for (i, &pi) in chunk.iter().enumerate() {
                let p = data.get(pi);
                x.slice_mut(s![2 * i * k..(2 * i + 1) * k, ..]).assign(&p.first.inputs);
                x.slice_mut(s![(2 * i + 1) * k..(2 * i + 2) * k, ..]).assign(&p.second.inputs);
            }
            let keep = match dst.rule {
                DstRule::DropConnect => Some(dst::dropconnect_sample(
                    m.net.input_layer().weights.dim(),
                    dst.dropconnect_p,
                    &mut m.dst_rng,
                )?),
                _ => None,
            };
            let override_w = keep
                .as_ref()
                .map(|keep| dst::dropconnect_weights(&m.net.input_layer().weights, keep));
            let cache = m.net.forward_with(x.view(), override_w)?;
            let out = cache.output();
            let mut out_grad = Array2::zeros((2 * b * k, 1));
            for (i, &pi) in chunk.iter().enumerate() {
                let r0 = out.slice(s![2 * i * k..(2 * i + 1) * k, 0]).sum();
                let r1 = out.slice(s![(2 * i + 1) * k..(2 * i + 2) * k, 0]).sum();
                let (loss, g) = ce_loss(r1 - r0, data.get(pi).label.value());
                epoch_loss += loss;
                let g = g / b as f64;
                out_grad.slice_mut(s![2 * i * k..(2 * i + 1) * k, 0]).fill(-g);
                out_grad.slice_mut(s![(2 * i + 1) * k..(2 * i + 2) * k, 0]).fill(g);
            }
            let mut grads = m.net.param_gradients(&cache, out_grad.view())?;
            match dst.rule {
                DstRule::DropConnect => {
                    let keep = keep.as_ref().expect("sampled above");
                    ndarray::Zip::from(&mut grads.weights[0]).and(keep).for_each(|g, &k| {
                        if !k {
                            *g = 0.0;
                        }
                    });
                }
                DstRule::L1 => {
                    let (_, sub) = dst::l1_penalty(&m.net.input_layer().weights, dst.l1_lambda);
                    grads.weights[0] += &sub;
                }
                _ => {}
            }
            adam_step(&mut m.net, &grads, &mut m.adam, dst.rule.is_masked())?;
            m.steps += 1;
            if dst.is_update_step(m.steps) {
                let change = dst::topology_update(
                    m.net.input_layer_mut(),
                    dst,
                    Some(&grads.weights[0]),
                    &mut m.dst_rng,
                )?;
                m.adam.reset_positions(0, &change.pruned);
                m.adam.reset_positions(0, &change.grown);
                events.push(TopologyEvent {
                    member: index,
                    step: m.steps,
                    active: m.net.input_active_count(),
                    pruned: change.pruned.len(),
                    grown: change.grown.len(),
                });
            }
        }
        last_epoch_ce = epoch_loss / n as f64;
    }
    Ok((last_epoch_ce, events))
}

/// Fraction of strictly-ordered pairs whose predicted preference agrees
/// with the teacher. Ties in either the label or the prediction count as
/// disagreement only when the label is strict.
pub fn preference_accuracy<M: RewardModel + ?Sized>(model: &M, pairs: &[PreferencePair]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for p in pairs.iter().filter(|p| p.label != Label::Equal) {
        let prob = predict_preference(model, &p.first, &p.second)?;
        let predicted_second = prob > 0.5;
        let predicted_first = prob < 0.5;
        total += 1;
        if (p.label == Label::Second && predicted_second) || (p.label == Label::First && predicted_first) {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("no strictly ordered pairs".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Linearly decaying exploration coefficient `beta_t = max(0, init - decay * t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuneSchedule {
    pub beta_init: f64,
    pub beta_decay: f64,
}

impl Default for RuneSchedule {
    fn default() -> Self {
        RuneSchedule {
            beta_init: 0.05,
            beta_decay: 0.00001,
        }
    }
}

impl RuneSchedule {
    pub fn beta(&self, t: u64) -> f64 {
        (self.beta_init - self.beta_decay * t as f64).max(0.0)
    }
}

/// Uncertainty bonus `beta_t * std` for one `(state, action)`.
pub fn rune_bonus(
    ensemble: &RewardEnsemble,
    schedule: &RuneSchedule,
    state: &[f64],
    action: &[f64],
    t: u64,
) -> Result<f64> {
    let (_, std) = ensemble.reward_infer(state, action)?;
    Ok(schedule.beta(t) * std)
}
