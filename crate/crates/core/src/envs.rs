//! Environments with known ground-truth rewards and the noise wrappers.
//!
//! All environments run fixed-horizon episodes: `done` is raised only at the
//! horizon. `reset(seed)` fully determines an episode given the action
//! sequence.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Actions live in `[-action_bound, action_bound]^action_dim`.
    pub action_bound: f64,
    pub episode_len: usize,
    /// Indices of task-relevant state features.
    pub relevant: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Step index within the episode, starting at 0.
    pub step: usize,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    /// Start a new episode and return the first observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Transition;
    /// Number of actions clipped into the action box so far.
    fn clipped_actions(&self) -> u64 {
        0
    }
}

impl<E: Env + ?Sized> Env for Box<E> {
    fn spec(&self) -> &EnvSpec {
        (**self).spec()
    }
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        (**self).reset(seed)
    }
    fn step(&mut self, action: &[f64]) -> Transition {
        (**self).step(action)
    }
    fn clipped_actions(&self) -> u64 {
        (**self).clipped_actions()
    }
}

fn clip_action(action: &[f64], bound: f64, counter: &mut u64) -> Vec<f64> {
    let clipped: Vec<f64> = action.iter().map(|a| a.clamp(-bound, bound)).collect();
    if clipped.as_slice() != action {
        *counter += 1;
        log::debug!("action {action:?} clipped into [-{bound}, {bound}]");
    }
    clipped
}

/// Torque-limited pendulum swing-up. Observation `(cos θ, sin θ, θ̇)`, θ = 0 upright.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    t: usize,
    clipped: u64,
}

impl Pendulum {
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const DT: f64 = 0.05;
    pub const G: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;

    pub fn new() -> Self {
        Pendulum {
            spec: EnvSpec {
                state_dim: 3,
                action_dim: 1,
                action_bound: Self::MAX_TORQUE,
                episode_len: 200,
                relevant: vec![0, 1, 2],
            },
            theta: PI,
            theta_dot: 0.0,
            t: 0,
            clipped: 0,
        }
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Angle wrapped into `[-π, π)`.
    pub fn wrap_angle(x: f64) -> f64 {
        (x + PI).rem_euclid(2.0 * PI) - PI
    }

    pub fn reward(theta: f64, theta_dot: f64, torque: f64) -> f64 {
        let th = Self::wrap_angle(theta);
        -(th * th + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "pendulum-reset", 0);
        self.theta = r.random_range(-PI..PI);
        self.theta_dot = r.random_range(-1.0..1.0);
        self.t = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Transition {
        let state = self.observation();
        let action = clip_action(action, Self::MAX_TORQUE, &mut self.clipped);
        let u = action[0];
        let reward = Self::reward(self.theta, self.theta_dot, u);
        let accel = 3.0 * Self::G / (2.0 * Self::LENGTH) * self.theta.sin()
            + 3.0 / (Self::MASS * Self::LENGTH * Self::LENGTH) * u;
        self.theta_dot = (self.theta_dot + accel * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += self.theta_dot * Self::DT;
        let step = self.t;
        self.t += 1;
        Transition {
            state,
            action,
            next_state: self.observation(),
            reward,
            done: self.t >= self.spec.episode_len,
            step,
        }
    }

    fn clipped_actions(&self) -> u64 {
        self.clipped
    }
}

/// Linear-reward task: states are i.i.d. standard normal, reward is
/// `w · s - 0.1 ||a||^2` with a fixed unit-norm `w`.
#[derive(Debug, Clone)]
pub struct SyntheticEnv {
    spec: EnvSpec,
    weights: Vec<f64>,
    state: Vec<f64>,
    rng: Rng,
    t: usize,
    clipped: u64,
}

impl SyntheticEnv {
    pub const EPISODE_LEN: usize = 100;

    /// `relevant_dims` state features, `action_dim` actions in `[-1, 1]`;
    /// the hidden reward direction is drawn from `weight_seed`.
    pub fn new(relevant_dims: usize, action_dim: usize, weight_seed: u64) -> Result<Self> {
        if relevant_dims == 0 || action_dim == 0 {
            return Err(Error::Config(
                "synthetic env needs positive state and action dimensions".into(),
            ));
        }
        let mut r = rng::stream(weight_seed, "synthetic-weights", 0);
        let mut weights: Vec<f64> = (0..relevant_dims).map(|_| r.sample(StandardNormal)).collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        weights.iter_mut().for_each(|w| *w /= norm);
        Ok(SyntheticEnv {
            spec: EnvSpec {
                state_dim: relevant_dims,
                action_dim,
                action_bound: 1.0,
                episode_len: Self::EPISODE_LEN,
                relevant: (0..relevant_dims).collect(),
            },
            weights,
            state: vec![0.0; relevant_dims],
            rng: rng::stream(0, "synthetic-states", 0),
            t: 0,
            clipped: 0,
        })
    }

    pub fn reward_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let lin: f64 = self.weights.iter().zip(state).map(|(w, s)| w * s).sum();
        lin - 0.1 * action.iter().map(|a| a * a).sum::<f64>()
    }

    fn draw_state(&mut self) -> Vec<f64> {
        (0..self.spec.state_dim)
            .map(|_| self.rng.sample(StandardNormal))
            .collect()
    }
}

impl Env for SyntheticEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = rng::stream(seed, "synthetic-states", 0);
        self.t = 0;
        self.state = self.draw_state();
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Transition {
        let action = clip_action(action, self.spec.action_bound, &mut self.clipped);
        let reward = self.reward(&self.state, &action);
        let next = self.draw_state();
        let state = std::mem::replace(&mut self.state, next);
        let step = self.t;
        self.t += 1;
        Transition {
            state,
            action,
            next_state: self.state.clone(),
            reward,
            done: self.t >= self.spec.episode_len,
            step,
        }
    }

    fn clipped_actions(&self) -> u64 {
        self.clipped
    }
}

/// Number of noise features to append to `d` original features so that a
/// fraction `noise_fraction` of the total is noise:
/// `ceil(d * n_f / (1 - n_f))`.
///
/// The fraction is interpreted as the decimal it prints as (`0.9` is nine
/// tenths, not the nearest binary double), and the ceiling is taken in exact
/// integer arithmetic.
pub fn noise_feature_count(d: usize, noise_fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&noise_fraction) {
        return Err(Error::Config(format!(
            "noise fraction must lie in [0, 1), got {noise_fraction}"
        )));
    }
    let (num, den) = decimal_ratio(noise_fraction);
    let d = d as u128;
    // n = ceil(d * num / (den - num))
    let top = d * num;
    let bottom = den - num;
    Ok(top.div_ceil(bottom) as usize)
}

/// `x` in `[0, 1)` as `num / 10^k` using its shortest round-trip decimal form.
fn decimal_ratio(x: f64) -> (u128, u128) {
    let text = format!("{x}");
    let frac = text.split_once('.').map_or("", |(_, f)| f);
    if frac.len() <= 30 {
        if let Ok(num) = if frac.is_empty() { Ok(0) } else { frac.parse::<u128>() } {
            return (num, 10u128.pow(frac.len() as u32));
        }
    }
    // Fall back to the binary value at 2^-64 resolution.
    let den = 1u128 << 64;
    ((x * den as f64) as u128, den)
}

/// Observed per-feature values from policy rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    features: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn new(features: Vec<Vec<f64>>) -> Result<Self> {
        let n = features.first().map_or(0, Vec::len);
        if features.is_empty() || n == 0 {
            return Err(Error::InsufficientData("feature bank is empty".into()));
        }
        if features.iter().any(|f| f.len() != n) {
            return Err(Error::Config(
                "feature bank columns have unequal sample counts".into(),
            ));
        }
        Ok(FeatureBank { features })
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn sample_count(&self) -> usize {
        self.features[0].len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn mean(&self, i: usize) -> f64 {
        let f = &self.features[i];
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// Roll out `policy` for `steps` environment steps and record every observed state.
pub fn collect_feature_bank<E, P>(env: &mut E, mut policy: P, steps: usize, seed: u64) -> Result<FeatureBank>
where
    E: Env + ?Sized,
    P: FnMut(&[f64]) -> Vec<f64>,
{
    if steps == 0 {
        return Err(Error::Config("feature bank needs at least one step".into()));
    }
    let d = env.spec().state_dim;
    let mut features = vec![Vec::with_capacity(steps); d];
    let mut episode = 0u64;
    let mut obs = env.reset(rng::derive_seed(seed, "bank-episode", episode));
    for _ in 0..steps {
        for (f, &v) in features.iter_mut().zip(&obs) {
            f.push(v);
        }
        let tr = env.step(&policy(&obs));
        obs = if tr.done {
            episode += 1;
            env.reset(rng::derive_seed(seed, "bank-episode", episode))
        } else {
            tr.next_state
        };
    }
    FeatureBank::new(features)
}

#[derive(Debug, Clone)]
enum NoiseSource {
    Gaussian,
    Imitating(Arc<FeatureBank>),
}

/// Appends task-irrelevant features to every observation of `base`.
pub struct NoisyEnv<E> {
    base: E,
    spec: EnvSpec,
    source: NoiseSource,
    n_noise: usize,
    seed: u64,
    rng: Rng,
    noise: Vec<f64>,
}

/// Extremely noisy wrapper: appends `noise_feature_count(d, n_f)` features,
/// each redrawn i.i.d. from N(0, 1) at every step.
pub fn ene_wrap<E: Env>(env: E, noise_fraction: f64, seed: u64) -> Result<NoisyEnv<E>> {
    NoisyEnv::new(env, noise_fraction, seed, NoiseSource::Gaussian)
}

/// Like [`ene_wrap`], but noise feature `j` is resampled uniformly from the
/// observed values of original feature `j mod d` in `bank`.
pub fn imitating_wrap<E: Env>(
    env: E,
    bank: Arc<FeatureBank>,
    noise_fraction: f64,
    seed: u64,
) -> Result<NoisyEnv<E>> {
    if bank.feature_count() != env.spec().state_dim {
        return Err(Error::Config(format!(
            "feature bank has {} features, environment has {}",
            bank.feature_count(),
            env.spec().state_dim
        )));
    }
    NoisyEnv::new(env, noise_fraction, seed, NoiseSource::Imitating(bank))
}

impl<E: Env> NoisyEnv<E> {
    fn new(base: E, noise_fraction: f64, seed: u64, source: NoiseSource) -> Result<Self> {
        let base_spec = base.spec().clone();
        let n_noise = noise_feature_count(base_spec.state_dim, noise_fraction)?;
        let spec = EnvSpec {
            state_dim: base_spec.state_dim + n_noise,
            ..base_spec
        };
        Ok(NoisyEnv {
            base,
            spec,
            source,
            n_noise,
            seed,
            rng: rng::stream(seed, "noise", 0),
            noise: vec![0.0; n_noise],
        })
    }

    pub fn noise_count(&self) -> usize {
        self.n_noise
    }

    pub fn base(&self) -> &E {
        &self.base
    }

    fn redraw(&mut self) {
        match &self.source {
            NoiseSource::Gaussian => {
                for v in &mut self.noise {
                    *v = self.rng.sample(StandardNormal);
                }
            }
            NoiseSource::Imitating(bank) => {
                let d = bank.feature_count();
                let n = bank.sample_count();
                for (j, v) in self.noise.iter_mut().enumerate() {
                    *v = bank.feature(j % d)[self.rng.random_range(0..n)];
                }
            }
        }
    }

    fn extend(&self, obs: Vec<f64>) -> Vec<f64> {
        let mut out = obs;
        out.extend_from_slice(&self.noise);
        out
    }
}

impl<E: Env> Env for NoisyEnv<E> {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let obs = self.base.reset(seed);
        self.rng = rng::stream(rng::derive_seed(self.seed, "noise", 0), "episode", seed);
        self.redraw();
        self.extend(obs)
    }

    fn step(&mut self, action: &[f64]) -> Transition {
        let tr = self.base.step(action);
        let state = self.extend(tr.state);
        self.redraw();
        let next_state = self.extend(tr.next_state);
        Transition {
            state,
            next_state,
            ..tr
        }
    }

    fn clipped_actions(&self) -> u64 {
        self.base.clipped_actions()
    }
}
