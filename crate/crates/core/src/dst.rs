//! Sparsity masks and topology rules.
//!
//! Every rule here acts on a layer's weight matrix together with its mask.
//! Dynamic rules (RigL growth, SET growth) keep the number of active
//! connections fixed: each update prunes `round(d_f * active)` of the
//! smallest-magnitude weights and grows the same number elsewhere.
//!
//! Ties are always broken by ascending `(row, col)`.

use std::cmp::Ordering;

use ndarray::{Array2, Zip};
use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Layer;
use crate::rng::Rng;

pub type Position = (usize, usize);

/// Boolean keep-mask over a weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityMask {
    keep: Array2<bool>,
    sparsity: f64,
    active: usize,
}

/// Number of active connections for a `rows x cols` layer at sparsity `s`.
pub fn target_active(rows: usize, cols: usize, sparsity: f64) -> usize {
    ((1.0 - sparsity) * (rows * cols) as f64).round() as usize
}

impl SparsityMask {
    /// Uniformly random mask with exactly `target_active(rows, cols, s)` active positions.
    pub fn random(rows: usize, cols: usize, sparsity: f64, rng: &mut Rng) -> Result<Self> {
        if !(sparsity > 0.0 && sparsity < 1.0) {
            return Err(Error::Config(format!(
                "sparsity must lie in (0, 1), got {sparsity}"
            )));
        }
        let total = rows * cols;
        let active = target_active(rows, cols, sparsity);
        let mut keep = Array2::from_elem((rows, cols), false);
        for idx in rand::seq::index::sample(rng, total, active) {
            keep[(idx / cols, idx % cols)] = true;
        }
        Ok(SparsityMask {
            keep,
            sparsity,
            active,
        })
    }

    /// Wrap an explicit keep-matrix; the sparsity level is read off the count.
    pub fn from_array(keep: Array2<bool>) -> Self {
        let active = keep.iter().filter(|&&k| k).count();
        let sparsity = 1.0 - active as f64 / keep.len().max(1) as f64;
        SparsityMask {
            keep,
            sparsity,
            active,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.keep.dim()
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn is_active(&self, row: usize, col: usize) -> bool {
        self.keep[(row, col)]
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.keep
    }

    fn deactivate(&mut self, p: Position) {
        if std::mem::replace(&mut self.keep[p], false) {
            self.active -= 1;
        }
    }

    fn activate(&mut self, p: Position) {
        if !std::mem::replace(&mut self.keep[p], true) {
            self.active += 1;
        }
    }

    /// Count of active connections per column (input feature).
    pub fn column_counts(&self) -> Vec<usize> {
        self.keep
            .columns()
            .into_iter()
            .map(|c| c.iter().filter(|&&k| k).count())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DstRule {
    /// Magnitude pruning with gradient-based (RigL) growth.
    R2nRigl,
    /// Magnitude pruning with random growth.
    Set,
    /// Random mask fixed at initialization.
    Static,
    /// Fresh random weight drop on every training pass.
    DropConnect,
    /// L1 penalty on the input-layer weights.
    L1,
    Dense,
}

impl DstRule {
    /// Rules that hold a persistent sparsity mask on the input layer.
    pub fn is_masked(self) -> bool {
        matches!(self, DstRule::R2nRigl | DstRule::Set | DstRule::Static)
    }

    /// Rules that change the mask during training.
    pub fn is_dynamic(self) -> bool {
        matches!(self, DstRule::R2nRigl | DstRule::Set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DstConfig {
    pub rule: DstRule,
    pub sparsity: f64,
    /// Gradient steps between topology updates.
    pub update_period: u64,
    pub drop_fraction: f64,
    pub dropconnect_p: f64,
    pub l1_lambda: f64,
    pub new_weight_init: f64,
}

impl Default for DstConfig {
    fn default() -> Self {
        DstConfig {
            rule: DstRule::Dense,
            sparsity: 0.8,
            update_period: 100,
            drop_fraction: 0.2,
            dropconnect_p: 0.2,
            l1_lambda: 0.01,
            new_weight_init: 0.0,
        }
    }
}

impl DstConfig {
    /// Reward-model side of R2N: s = 0.8, period 100, drop fraction 0.2.
    pub fn reward_rigl() -> Self {
        DstConfig {
            rule: DstRule::R2nRigl,
            ..Default::default()
        }
    }

    /// Actor/critic side of R2N: s = 0.8, period 1000, drop fraction 0.05.
    pub fn rl_rigl() -> Self {
        DstConfig {
            rule: DstRule::R2nRigl,
            update_period: 1000,
            drop_fraction: 0.05,
            ..Default::default()
        }
    }

    pub fn with_rule(rule: DstRule) -> Self {
        DstConfig {
            rule,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity must lie in (0, 1), got {}",
                self.sparsity
            )));
        }
        if !open_unit(self.drop_fraction) {
            return Err(Error::Config(format!(
                "drop fraction must lie in (0, 1), got {}",
                self.drop_fraction
            )));
        }
        if self.update_period < 1 {
            return Err(Error::Config("topology update period must be >= 1".into()));
        }
        if !(self.l1_lambda >= 0.0) {
            return Err(Error::Config(format!(
                "L1 coefficient must be >= 0, got {}",
                self.l1_lambda
            )));
        }
        if !(0.0..1.0).contains(&self.dropconnect_p) {
            return Err(Error::Config(format!(
                "DropConnect probability must lie in [0, 1), got {}",
                self.dropconnect_p
            )));
        }
        Ok(())
    }

    /// Whether gradient step `t` (1-based) triggers a topology update.
    pub fn is_update_step(&self, t: u64) -> bool {
        self.rule.is_dynamic() && t > 0 && t % self.update_period == 0
    }
}

fn by_position(a: &Position, b: &Position) -> Ordering {
    a.cmp(b)
}

/// Remove the `count` active positions with the smallest `|weight|`.
pub fn prune_count(
    weights: &mut Array2<f64>,
    mask: &mut SparsityMask,
    count: usize,
) -> Result<Vec<Position>> {
    check_mask_shape(weights, mask)?;
    if count > mask.active_count() {
        return Err(Error::Config(format!(
            "cannot prune {count} of {} active connections",
            mask.active_count()
        )));
    }
    let mut active: Vec<(f64, Position)> = mask
        .keep
        .indexed_iter()
        .filter(|(_, &k)| k)
        .map(|(p, _)| (weights[p].abs(), p))
        .collect();
    active.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| by_position(&a.1, &b.1)));
    let pruned: Vec<Position> = active.into_iter().take(count).map(|(_, p)| p).collect();
    for &p in &pruned {
        mask.deactivate(p);
        weights[p] = 0.0;
    }
    Ok(pruned)
}

/// Prune `round(drop_fraction * active)` smallest-magnitude active weights.
pub fn prune_smallest(
    weights: &mut Array2<f64>,
    mask: &mut SparsityMask,
    drop_fraction: f64,
) -> Result<Vec<Position>> {
    if !(drop_fraction > 0.0 && drop_fraction < 1.0) {
        return Err(Error::Config(format!(
            "drop fraction must lie in (0, 1), got {drop_fraction}"
        )));
    }
    let n_drop = (drop_fraction * mask.active_count() as f64).round() as usize;
    prune_count(weights, mask, n_drop)
}

fn eligible_positions(mask: &SparsityMask, excluded: &[Position]) -> Array2<bool> {
    let mut eligible = mask.keep.mapv(|k| !k);
    for &p in excluded {
        eligible[p] = false;
    }
    eligible
}

fn check_mask_shape(weights: &Array2<f64>, mask: &SparsityMask) -> Result<()> {
    if weights.dim() != mask.shape() {
        return Err(Error::shape(
            "mask",
            format!("{:?}", weights.dim()),
            format!("{:?}", mask.shape()),
        ));
    }
    Ok(())
}

/// Activate the `count` eligible inactive positions with the largest
/// `|dense_grads|`. Positions in `excluded` (the same-step pruned set) are
/// never chosen. Grown weights start at zero.
pub fn grow_rigl(
    weights: &mut Array2<f64>,
    mask: &mut SparsityMask,
    dense_grads: &Array2<f64>,
    count: usize,
    excluded: &[Position],
) -> Result<Vec<Position>> {
    check_mask_shape(weights, mask)?;
    if dense_grads.dim() != weights.dim() {
        return Err(Error::shape(
            "dense gradients",
            format!("{:?}", weights.dim()),
            format!("{:?}", dense_grads.dim()),
        ));
    }
    let eligible = eligible_positions(mask, excluded);
    let mut candidates: Vec<(f64, Position)> = eligible
        .indexed_iter()
        .filter(|(_, &e)| e)
        .map(|(p, _)| (dense_grads[p].abs(), p))
        .collect();
    if count > candidates.len() {
        return Err(Error::Config(format!(
            "cannot grow {count} connections, only {} eligible",
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| by_position(&a.1, &b.1)));
    let grown: Vec<Position> = candidates.into_iter().take(count).map(|(_, p)| p).collect();
    for &p in &grown {
        mask.activate(p);
        weights[p] = 0.0;
    }
    Ok(grown)
}

/// SET growth: `count` eligible positions chosen uniformly without replacement.
pub fn grow_set_random(
    weights: &mut Array2<f64>,
    mask: &mut SparsityMask,
    count: usize,
    excluded: &[Position],
    rng: &mut Rng,
) -> Result<Vec<Position>> {
    check_mask_shape(weights, mask)?;
    let eligible = eligible_positions(mask, excluded);
    let candidates: Vec<Position> = eligible
        .indexed_iter()
        .filter(|(_, &e)| e)
        .map(|(p, _)| p)
        .collect();
    if count > candidates.len() {
        return Err(Error::Config(format!(
            "cannot grow {count} connections, only {} eligible",
            candidates.len()
        )));
    }
    let mut grown: Vec<Position> = rand::seq::index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    grown.sort_unstable();
    for &p in &grown {
        mask.activate(p);
        weights[p] = 0.0;
    }
    Ok(grown)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TopologyChange {
    pub pruned: Vec<Position>,
    pub grown: Vec<Position>,
}

/// Apply one topology update to `layer` according to `cfg.rule`.
///
/// The caller is responsible for resetting optimizer moments at
/// `TopologyChange::grown`.
pub fn topology_update(
    layer: &mut Layer,
    cfg: &DstConfig,
    dense_grads: Option<&Array2<f64>>,
    rng: &mut Rng,
) -> Result<TopologyChange> {
    if !cfg.rule.is_dynamic() {
        return Ok(TopologyChange::default());
    }
    let Layer { weights, mask, .. } = layer;
    let mask = mask
        .as_mut()
        .ok_or_else(|| Error::Config(format!("{:?} requires a masked layer", cfg.rule)))?;
    let active_before = mask.active_count();
    let grads = match cfg.rule {
        DstRule::R2nRigl => Some(dense_grads.ok_or_else(|| {
            Error::Config("RigL growth requires dense gradients".into())
        })?),
        _ => None,
    };
    let pruned = prune_smallest(weights, mask, cfg.drop_fraction)?;
    let grown = match grads {
        Some(g) => grow_rigl(weights, mask, g, pruned.len(), &pruned)?,
        None => grow_set_random(weights, mask, pruned.len(), &pruned, rng)?,
    };
    if cfg.new_weight_init != 0.0 {
        for &p in &grown {
            weights[p] = cfg.new_weight_init;
        }
    }
    debug_assert_eq!(mask.active_count(), active_before);
    Ok(TopologyChange { pruned, grown })
}

/// Keep-mask for one DropConnect pass: each weight is dropped independently
/// with probability `p`.
pub fn dropconnect_sample(shape: (usize, usize), p: f64, rng: &mut Rng) -> Result<Array2<bool>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "DropConnect probability must lie in [0, 1), got {p}"
        )));
    }
    let drop = Bernoulli::new(p).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Array2::from_shape_simple_fn(shape, || !drop.sample(rng)))
}

/// Training-pass weights: `weights` with dropped entries zeroed.
pub fn dropconnect_weights(weights: &Array2<f64>, keep: &Array2<bool>) -> Array2<f64> {
    let mut out = weights.clone();
    Zip::from(&mut out).and(keep).for_each(|w, &k| {
        if !k {
            *w = 0.0;
        }
    });
    out
}

/// Evaluation-pass weights: every weight scaled by `1 - p`.
pub fn dropconnect_eval_weights(weights: &Array2<f64>, p: f64) -> Array2<f64> {
    weights * (1.0 - p)
}

/// `lambda * sum |w|` and its subgradient `lambda * sign(w)` with `sign(0) = 0`.
pub fn l1_penalty(weights: &Array2<f64>, lambda: f64) -> (f64, Array2<f64>) {
    let penalty = lambda * weights.iter().map(|w| w.abs()).sum::<f64>();
    let grad = weights.mapv(|w| {
        if w > 0.0 {
            lambda
        } else if w < 0.0 {
            -lambda
        } else {
            0.0
        }
    });
    (penalty, grad)
}

/// Input-layer connectivity split between relevant and noise features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub step: u64,
    pub per_feature: Vec<usize>,
    pub avg_relevant: f64,
    /// Zero when the input has no noise features.
    pub avg_noise: f64,
}

impl ConnectivityReport {
    /// Average relevant connections over average noise connections.
    pub fn ratio(&self) -> f64 {
        self.avg_relevant / self.avg_noise
    }
}

pub fn connectivity_stats(layer: &Layer, relevant: &[usize], step: u64) -> Result<ConnectivityReport> {
    if relevant.is_empty() {
        return Err(Error::Config("relevant feature set is empty".into()));
    }
    let cols = layer.in_width();
    if let Some(&bad) = relevant.iter().find(|&&i| i >= cols) {
        return Err(Error::Config(format!(
            "relevant feature index {bad} outside input width {cols}"
        )));
    }
    let per_feature = match &layer.mask {
        Some(m) => m.column_counts(),
        None => vec![layer.out_width(); cols],
    };
    let mut is_relevant = vec![false; cols];
    for &i in relevant {
        is_relevant[i] = true;
    }
    let (mut rel_sum, mut rel_n, mut noise_sum, mut noise_n) = (0usize, 0usize, 0usize, 0usize);
    for (c, &count) in per_feature.iter().enumerate() {
        if is_relevant[c] {
            rel_sum += count;
            rel_n += 1;
        } else {
            noise_sum += count;
            noise_n += 1;
        }
    }
    let avg = |s: usize, n: usize| if n == 0 { 0.0 } else { s as f64 / n as f64 };
    Ok(ConnectivityReport {
        step,
        per_feature,
        avg_relevant: avg(rel_sum, rel_n),
        avg_noise: avg(noise_sum, noise_n),
    })
}

/// Uniform random draw in `[-bound, bound)`, used by tests and fixtures.
pub fn uniform_matrix(shape: (usize, usize), bound: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn mask_from(active: &[Position], shape: (usize, usize)) -> SparsityMask {
        let mut keep = Array2::from_elem(shape, false);
        for &p in active {
            keep[p] = true;
        }
        SparsityMask::from_array(keep)
    }

    #[test]
    fn random_mask_counts() {
        let mut r = rng::stream(1, "t", 0);
        let m = SparsityMask::random(10, 10, 0.8, &mut r).unwrap();
        assert_eq!(m.active_count(), 20);
        assert_eq!(m.as_array().iter().filter(|&&k| k).count(), 20);
        let m = SparsityMask::random(1, 5, 0.8, &mut r).unwrap();
        assert_eq!(m.active_count(), 1);
    }

    #[test]
    fn random_mask_is_deterministic() {
        let a = SparsityMask::random(8, 9, 0.7, &mut rng::stream(3, "m", 0)).unwrap();
        let b = SparsityMask::random(8, 9, 0.7, &mut rng::stream(3, "m", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_mask_rejects_bad_sparsity() {
        let mut r = rng::stream(1, "t", 0);
        for s in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(SparsityMask::random(3, 3, s, &mut r).is_err());
        }
    }

    #[test]
    fn prune_picks_smallest_magnitude() {
        let mut w = array![[0.5, -0.1], [0.3, 0.0]];
        let mut m = mask_from(&[(0, 0), (0, 1), (1, 0)], (2, 2));
        let pruned = prune_count(&mut w, &mut m, 1).unwrap();
        assert_eq!(pruned, vec![(0, 1)]);
        assert_eq!(w[(0, 1)], 0.0);
        assert!(!m.is_active(0, 1));
        assert_eq!(m.active_count(), 2);
    }

    #[test]
    fn prune_ties_go_to_lowest_position() {
        let mut w = array![[0.2, -0.2], [0.2, -0.2]];
        let mut m = mask_from(&[(0, 0), (0, 1), (1, 0), (1, 1)], (2, 2));
        assert_eq!(prune_count(&mut w, &mut m, 1).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn prune_fraction_arithmetic() {
        let mut r = rng::stream(5, "t", 0);
        let mut w = uniform_matrix((20, 25), 1.0, &mut r);
        let mut m = SparsityMask::random(20, 25, 0.8, &mut r).unwrap();
        assert_eq!(m.active_count(), 100);
        let pruned = prune_smallest(&mut w, &mut m, 0.2).unwrap();
        assert_eq!(pruned.len(), 20);
        assert_eq!(m.active_count(), 80);
    }

    #[test]
    fn prune_rounding_to_zero_is_noop() {
        let mut w = array![[1.0, 2.0]];
        let mut m = mask_from(&[(0, 0), (0, 1)], (1, 2));
        let pruned = prune_smallest(&mut w, &mut m, 0.2).unwrap();
        assert!(pruned.is_empty());
        assert_eq!(m.active_count(), 2);
    }

    #[test]
    fn rigl_grows_largest_gradient() {
        let mut w = array![[0.7, 0.0], [0.0, 0.0]];
        let mut m = mask_from(&[(0, 0)], (2, 2));
        let g = array![[5.0, -0.9], [0.2, 0.1]];
        let grown = grow_rigl(&mut w, &mut m, &g, 1, &[]).unwrap();
        assert_eq!(grown, vec![(0, 1)]);
        assert_eq!(w[(0, 1)], 0.0);
        assert!(m.is_active(0, 1));
    }

    #[test]
    fn rigl_respects_exclusion_and_eligibility() {
        let mut w = Array2::zeros((2, 2));
        let mut m = mask_from(&[(0, 0)], (2, 2));
        let g = array![[5.0, -0.9], [0.2, 0.1]];
        let grown = grow_rigl(&mut w, &mut m, &g, 1, &[(0, 1)]).unwrap();
        assert_eq!(grown, vec![(1, 0)]);
        assert!(grow_rigl(&mut w, &mut m, &g, 2, &[(0, 1)]).is_err());
    }

    #[test]
    fn set_growth_exhausts_eligible() {
        let mut r = rng::stream(2, "t", 0);
        let mut w = Array2::zeros((2, 3));
        let mut m = mask_from(&[(0, 0), (1, 2)], (2, 3));
        let excluded = [(0, 1)];
        let grown = grow_set_random(&mut w, &mut m, 3, &excluded, &mut r).unwrap();
        assert_eq!(grown, vec![(0, 2), (1, 0), (1, 1)]);
        assert!(!m.is_active(0, 1));
        assert!(grow_set_random(&mut w, &mut m, 1, &excluded, &mut r).is_err());
    }

    fn sparse_layer(rows: usize, cols: usize, s: f64, seed: u64) -> Layer {
        let mut r = rng::stream(seed, "layer", 0);
        let mut layer = Layer::new(
            uniform_matrix((rows, cols), 1.0, &mut r),
            Array1::zeros(rows),
            Activation::Identity,
        )
        .unwrap();
        layer
            .set_mask(SparsityMask::random(rows, cols, s, &mut r).unwrap())
            .unwrap();
        layer
    }

    #[test]
    fn static_rule_is_noop() {
        let mut layer = sparse_layer(6, 7, 0.8, 1);
        let before = layer.clone();
        let cfg = DstConfig::with_rule(DstRule::Static);
        let ch = topology_update(&mut layer, &cfg, None, &mut rng::stream(0, "x", 0)).unwrap();
        assert_eq!(ch, TopologyChange::default());
        assert_eq!(layer, before);
    }

    #[test]
    fn rigl_update_conserves_and_is_disjoint() {
        let mut r = rng::stream(4, "g", 0);
        let mut layer = sparse_layer(20, 25, 0.8, 4);
        let g = uniform_matrix((20, 25), 1.0, &mut r);
        let cfg = DstConfig::reward_rigl();
        let ch = topology_update(&mut layer, &cfg, Some(&g), &mut r).unwrap();
        assert_eq!(ch.pruned.len(), 20);
        assert_eq!(ch.grown.len(), 20);
        assert!(ch.pruned.iter().all(|p| !ch.grown.contains(p)));
        assert_eq!(layer.mask.as_ref().unwrap().active_count(), 100);
        assert!(ch.grown.iter().all(|&p| layer.weights[p] == 0.0));
    }

    #[test]
    fn rigl_update_requires_gradients() {
        let mut layer = sparse_layer(4, 4, 0.5, 1);
        let cfg = DstConfig::reward_rigl();
        assert!(topology_update(&mut layer, &cfg, None, &mut rng::stream(0, "x", 0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DstConfig::reward_rigl().validate().is_ok());
        let bad = |f: fn(&mut DstConfig)| {
            let mut c = DstConfig::reward_rigl();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.sparsity = 1.0));
        assert!(bad(|c| c.drop_fraction = 0.0));
        assert!(bad(|c| c.update_period = 0));
        assert!(bad(|c| c.l1_lambda = -1.0));
    }

    #[test]
    fn update_schedule() {
        let cfg = DstConfig::reward_rigl();
        let n = (1..=500).filter(|&t| cfg.is_update_step(t)).count();
        assert_eq!(n, 5);
        assert!(!DstConfig::with_rule(DstRule::Static).is_update_step(100));
    }

    #[test]
    fn dropconnect_degenerate_and_rate() {
        let mut r = rng::stream(9, "dc", 0);
        let keep = dropconnect_sample((10, 10), 0.0, &mut r).unwrap();
        assert!(keep.iter().all(|&k| k));
        let mut dropped = 0usize;
        let samples = 100_000;
        for _ in 0..samples / 100 {
            let keep = dropconnect_sample((10, 10), 0.2, &mut r).unwrap();
            dropped += keep.iter().filter(|&&k| !k).count();
        }
        let rate = dropped as f64 / samples as f64;
        assert!((0.19..=0.21).contains(&rate), "{rate}");
        assert!(dropconnect_sample((2, 2), 1.0, &mut r).is_err());
    }

    #[test]
    fn dropconnect_eval_scales_linear_output() {
        let w = array![[1.0, -2.0], [0.5, 4.0]];
        let x = array![[3.0, 1.0]];
        let full = x.dot(&w.t());
        let scaled = x.dot(&dropconnect_eval_weights(&w, 0.2).t());
        for (a, b) in scaled.iter().zip(full.iter()) {
            assert!((a - 0.8 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn l1_values() {
        let (p, g) = l1_penalty(&array![[1.0, -2.0, 0.0]], 0.01);
        assert!((p - 0.03).abs() < 1e-15);
        assert_eq!(g, array![[0.01, -0.01, 0.0]]);
        let (p, g) = l1_penalty(&array![[1.0, -2.0, 0.0]], 0.0);
        assert_eq!(p, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn connectivity_dense_and_relevant_only() {
        let dense = Layer::new(Array2::ones((4, 6)), Array1::zeros(4), Activation::Relu).unwrap();
        let rep = connectivity_stats(&dense, &[0, 1], 0).unwrap();
        assert_eq!(rep.avg_relevant, 4.0);
        assert_eq!(rep.avg_noise, 4.0);

        let mut layer = dense.clone();
        let mut keep = Array2::from_elem((4, 6), false);
        keep.column_mut(0).fill(true);
        keep[(2, 1)] = true;
        layer.set_mask(SparsityMask::from_array(keep)).unwrap();
        let rep = connectivity_stats(&layer, &[0, 1], 3).unwrap();
        assert_eq!(rep.avg_noise, 0.0);
        assert_eq!(rep.avg_relevant, 2.5);
        assert_eq!(rep.per_feature.iter().sum::<usize>(), 5);
        assert!(connectivity_stats(&layer, &[], 0).is_err());
        assert!(connectivity_stats(&layer, &[6], 0).is_err());
    }

    proptest! {
        #[test]
        fn topology_updates_conserve_active_count(
            rows in 2usize..12, cols in 2usize..12, seed in any::<u64>(),
            sparsity in 0.3f64..0.9, drop in 0.05f64..0.5, set_rule in any::<bool>(),
        ) {
            let mut layer = sparse_layer(rows, cols, sparsity, seed);
            let target = target_active(rows, cols, sparsity);
            // growth may not reuse same-step pruned slots
            prop_assume!((drop * target as f64).round() as usize <= rows * cols - target);
            prop_assert_eq!(layer.mask.as_ref().unwrap().active_count(), target);
            let mut r = rng::stream(seed, "prop", 0);
            let cfg = DstConfig {
                rule: if set_rule { DstRule::Set } else { DstRule::R2nRigl },
                drop_fraction: drop,
                sparsity,
                ..Default::default()
            };
            for _ in 0..3 {
                let g = uniform_matrix((rows, cols), 1.0, &mut r);
                let ch = topology_update(&mut layer, &cfg, Some(&g), &mut r).unwrap();
                let mask = layer.mask.as_ref().unwrap();
                prop_assert_eq!(mask.active_count(), target);
                prop_assert_eq!(mask.as_array().iter().filter(|&&k| k).count(), target);
                prop_assert!(ch.pruned.iter().all(|p| !ch.grown.contains(p)));
                for (p, &k) in mask.as_array().indexed_iter() {
                    if !k {
                        prop_assert_eq!(layer.weights[p], 0.0);
                    }
                }
                // nudge weights as training would
                for (p, &k) in mask.as_array().indexed_iter() {
                    if k { layer.weights[p] += r.random_range(-0.1..0.1); }
                }
            }
        }
    }
}
