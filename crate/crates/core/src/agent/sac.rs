//! Soft actor-critic with optionally sparse input layers.
//!
//! The actor emits the mean and a squashed log-std of a Gaussian; actions
//! are `bound * tanh(u)`. Two critics take `(state, action)` and have soft
//! target copies that also mirror the online masks.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dst::{self, DstConfig, DstRule, SparsityMask, TopologyChange};
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamState, GradientBundle, Network, ScalarAdam};
use crate::rng::{self, Rng};

use super::replay::Batch;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub actor_update_freq: u64,
    pub critic_target_update_freq: u64,
    pub init_temperature: f64,
    pub learn_temperature: bool,
    pub discount: f64,
    pub batch_size: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![64, 64],
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            alpha_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            tau: 0.005,
            actor_update_freq: 1,
            critic_target_update_freq: 2,
            init_temperature: 0.1,
            learn_temperature: true,
            discount: 0.99,
            batch_size: 256,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

impl SacConfig {
    /// Two hidden layers of 1024 units, batch 1024.
    pub fn full() -> Self {
        SacConfig {
            hidden: vec![1024, 1024],
            batch_size: 1024,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("SAC batch size must be positive".into()));
        }
        if self.actor_update_freq == 0 || self.critic_target_update_freq == 0 {
            return Err(Error::Config("SAC update frequencies must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config("tau and discount must lie in [0, 1]".into()));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::Config("initial temperature must be positive".into()));
        }
        if !(self.log_std_min < self.log_std_max) {
            return Err(Error::Config("log_std_min must be below log_std_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SacLosses {
    /// Sum of both critics' mean squared errors.
    pub critic: f64,
    pub actor: Option<f64>,
    pub alpha: f64,
    pub entropy: Option<f64>,
}

/// Dense input-layer gradients from the most recent update, kept for RigL growth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InputGrads {
    actor: Option<Array2<f64>>,
    critics: [Array2<f64>; 2],
}

/// Sampled actions and everything the actor gradient needs.
#[derive(Debug, Clone)]
pub struct PolicySample {
    /// Scaled actions, `(batch, act_dim)`.
    pub actions: Array2<f64>,
    /// `log pi(a|s)` per row.
    pub log_prob: Array1<f64>,
    pub eps: Array2<f64>,
    pub tanh_u: Array2<f64>,
    pub std: Array2<f64>,
    /// Pre-squash log-std network outputs.
    pub z: Array2<f64>,
}

/// Which topology change happened to which network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RlTopologyEvent {
    pub update: u64,
    pub actor: TopologyChange,
    pub critics: [TopologyChange; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacAgent {
    pub cfg: SacConfig,
    pub dst: DstConfig,
    obs_dim: usize,
    act_dim: usize,
    action_bound: f64,
    pub actor: Network,
    pub critics: [Network; 2],
    pub targets: [Network; 2],
    actor_adam: AdamState,
    critic_adam: [AdamState; 2],
    pub log_alpha: f64,
    alpha_adam: ScalarAdam,
    target_entropy: f64,
    /// SAC updates performed.
    pub updates: u64,
    rng: Rng,
    dst_rng: Rng,
    last_grads: Option<InputGrads>,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(hidden);
    w.push(output);
    w
}

fn concat_cols(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}

/// `log(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

impl SacAgent {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        action_bound: f64,
        cfg: &SacConfig,
        dst: &DstConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        match dst.rule {
            DstRule::Dense => {}
            DstRule::DropConnect | DstRule::L1 => {
                return Err(Error::Config(format!(
                    "{:?} is only supported on reward models",
                    dst.rule
                )))
            }
            _ => dst.validate()?,
        }
        let act = Activation::Relu;
        let mut actor = Network::init(&widths(obs_dim, &cfg.hidden, 2 * act_dim), act, rng::derive_seed(seed, "actor-init", 0))?;
        let critic_widths = widths(obs_dim + act_dim, &cfg.hidden, 1);
        let mut critics = [
            Network::init(&critic_widths, act, rng::derive_seed(seed, "critic-init", 0))?,
            Network::init(&critic_widths, act, rng::derive_seed(seed, "critic-init", 1))?,
        ];
        if dst.rule.is_masked() {
            let mut mask_rng = rng::stream(seed, "rl-mask", 0);
            for net in std::iter::once(&mut actor).chain(critics.iter_mut()) {
                let (r, c) = net.input_layer().weights.dim();
                net.input_layer_mut().set_mask(SparsityMask::random(r, c, dst.sparsity, &mut mask_rng)?)?;
            }
        }
        let targets = critics.clone();
        let adam = |n: &Network, lr: f64| AdamState::with_betas(n, lr, cfg.beta1, cfg.beta2);
        Ok(SacAgent {
            actor_adam: adam(&actor, cfg.actor_lr),
            critic_adam: [adam(&critics[0], cfg.critic_lr), adam(&critics[1], cfg.critic_lr)],
            cfg: cfg.clone(),
            dst: dst.clone(),
            obs_dim,
            act_dim,
            action_bound,
            actor,
            critics,
            targets,
            log_alpha: cfg.init_temperature.ln(),
            alpha_adam: ScalarAdam::new(cfg.alpha_lr, cfg.beta1, cfg.beta2),
            target_entropy: -(act_dim as f64),
            updates: 0,
            rng: rng::stream(seed, "sac", 0),
            dst_rng: rng::stream(seed, "rl-dst", 0),
            last_grads: None,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    fn log_std(&self, z: f64) -> f64 {
        let (lo, hi) = (self.cfg.log_std_min, self.cfg.log_std_max);
        lo + 0.5 * (hi - lo) * (z.tanh() + 1.0)
    }

    /// Action for one observation: the squashed mean when `deterministic`,
    /// otherwise a squashed Gaussian draw.
    pub fn act(&mut self, obs: &[f64], deterministic: bool) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape("observation", self.obs_dim, obs.len()));
        }
        let x = ndarray::ArrayView2::from_shape((1, obs.len()), obs).expect("row shape");
        let out = self.actor.predict(x.view())?;
        let mut a = Vec::with_capacity(self.act_dim);
        for j in 0..self.act_dim {
            let m = out[[0, j]];
            let u = if deterministic {
                m
            } else {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                m + self.log_std(out[[0, self.act_dim + j]]).exp() * e
            };
            a.push(self.action_bound * u.tanh());
        }
        Ok(a)
    }

    /// Squashed mean action without touching the agent's RNG.
    pub fn act_greedy(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape("observation", self.obs_dim, obs.len()));
        }
        let x = ndarray::ArrayView2::from_shape((1, obs.len()), obs).expect("row shape");
        let out = self.actor.predict(x.view())?;
        Ok((0..self.act_dim).map(|j| self.action_bound * out[[0, j]].tanh()).collect())
    }

    /// Reparameterized sample from the policy given raw actor outputs and noise.
    pub fn sample_from_output(&self, out: ArrayView2<'_, f64>, eps: Array2<f64>) -> PolicySample {
        let (n, d) = (out.nrows(), self.act_dim);
        let mut actions = Array2::zeros((n, d));
        let mut tanh_u = Array2::zeros((n, d));
        let mut std = Array2::zeros((n, d));
        let z = out.slice(s![.., d..]).to_owned();
        let mut log_prob = Array1::zeros(n);
        for i in 0..n {
            let mut lp = 0.0;
            for j in 0..d {
                let ls = self.log_std(z[[i, j]]);
                let sd = ls.exp();
                let u = out[[i, j]] + sd * eps[[i, j]];
                let t = u.tanh();
                actions[[i, j]] = self.action_bound * t;
                tanh_u[[i, j]] = t;
                std[[i, j]] = sd;
                lp += -0.5 * eps[[i, j]] * eps[[i, j]] - ls - 0.5 * LN_2PI - log_one_minus_tanh_sq(u);
            }
            log_prob[i] = lp;
        }
        PolicySample {
            actions,
            log_prob,
            eps,
            tanh_u,
            std,
            z,
        }
    }

    fn draw_eps(&mut self, rows: usize) -> Array2<f64> {
        let d = self.act_dim;
        Array2::from_shape_simple_fn((rows, d), || StandardNormal.sample(&mut self.rng))
    }

    fn sample_policy(&mut self, obs: ArrayView2<'_, f64>) -> Result<PolicySample> {
        let out = self.actor.predict(obs)?;
        let eps = self.draw_eps(obs.nrows());
        Ok(self.sample_from_output(out.view(), eps))
    }

    /// Soft Bellman targets `r + gamma * (1 - terminal) * (min_i Q'_i(s', a') - alpha log pi(a'|s'))`.
    pub fn critic_targets(&mut self, batch: &Batch) -> Result<Array1<f64>> {
        let next = self.sample_policy(batch.next_obs.view())?;
        let x = concat_cols(batch.next_obs.view(), next.actions.view());
        let q0 = self.targets[0].predict(x.view())?;
        let q1 = self.targets[1].predict(x.view())?;
        let alpha = self.alpha();
        let gamma = self.cfg.discount;
        Ok(Array1::from_shape_fn(batch.rewards.len(), |i| {
            let soft = q0[[i, 0]].min(q1[[i, 0]]) - alpha * next.log_prob[i];
            let cont = 1.0 - batch.terminal[i];
            // gamma = 0 must not let a non-finite soft value leak in
            if gamma == 0.0 || cont == 0.0 {
                batch.rewards[i]
            } else {
                batch.rewards[i] + gamma * cont * soft
            }
        }))
    }

    /// Actor loss `mean(alpha * log pi - min Q)` and its gradient with respect
    /// to the raw actor outputs, for fixed noise `eps`.
    pub fn actor_loss_from_output(
        &self,
        obs: ArrayView2<'_, f64>,
        out: ArrayView2<'_, f64>,
        eps: &Array2<f64>,
    ) -> Result<(f64, Array2<f64>, PolicySample)> {
        let (n, d) = (obs.nrows(), self.act_dim);
        let sample = self.sample_from_output(out, eps.clone());
        let x = concat_cols(obs, sample.actions.view());
        let mut q = Vec::with_capacity(2);
        let mut dq_da = Vec::with_capacity(2);
        for c in &self.critics {
            let cache = c.forward(x.view())?;
            let gin = c.input_gradient(&cache, Array2::ones((n, 1)).view())?;
            q.push(cache.output().column(0).to_owned());
            dq_da.push(gin.slice(s![.., self.obs_dim..]).to_owned());
        }
        let alpha = self.alpha();
        let scale = 1.0 / n as f64;
        let half_range = 0.5 * (self.cfg.log_std_max - self.cfg.log_std_min);
        let mut loss = 0.0;
        let mut grad = Array2::zeros((n, 2 * d));
        for i in 0..n {
            let pick = if q[0][i] <= q[1][i] { 0 } else { 1 };
            loss += alpha * sample.log_prob[i] - q[pick][i];
            for j in 0..d {
                let t = sample.tanh_u[[i, j]];
                let du = 2.0 * alpha * t - dq_da[pick][[i, j]] * self.action_bound * (1.0 - t * t);
                let dls = -alpha + du * sample.std[[i, j]] * eps[[i, j]];
                let th = sample.z[[i, j]].tanh();
                grad[[i, j]] = du * scale;
                grad[[i, d + j]] = dls * half_range * (1.0 - th * th) * scale;
            }
        }
        Ok((loss * scale, grad, sample))
    }

    /// One SAC update on `batch`.
    pub fn update(&mut self, batch: &Batch) -> Result<SacLosses> {
        let n = batch.rewards.len();
        if n == 0 {
            return Err(Error::InsufficientData("empty SAC batch".into()));
        }
        let masked = self.dst.rule.is_masked();
        let y = self.critic_targets(batch)?;
        let x = concat_cols(batch.obs.view(), batch.actions.view());
        let mut critic_loss = 0.0;
        let mut critic_grads: Vec<Array2<f64>> = Vec::with_capacity(2);
        for i in 0..2 {
            let cache = self.critics[i].forward(x.view())?;
            let q = cache.output();
            let mut g = Array2::zeros((n, 1));
            for r in 0..n {
                let e = q[[r, 0]] - y[r];
                critic_loss += e * e / n as f64;
                g[[r, 0]] = 2.0 * e / n as f64;
            }
            let grads = self.critics[i].param_gradients(&cache, g.view())?;
            critic_grads.push(grads.weights[0].clone());
            adam_step(&mut self.critics[i], &grads, &mut self.critic_adam[i], masked)?;
        }

        let mut losses = SacLosses {
            critic: critic_loss,
            ..Default::default()
        };
        let mut actor_grad = None;
        if self.updates % self.cfg.actor_update_freq == 0 {
            let cache = self.actor.forward(batch.obs.view())?;
            let eps = self.draw_eps(n);
            let (loss, out_grad, sample) = self.actor_loss_from_output(batch.obs.view(), cache.output().view(), &eps)?;
            let grads = self.actor.param_gradients(&cache, out_grad.view())?;
            actor_grad = Some(grads.weights[0].clone());
            adam_step(&mut self.actor, &grads, &mut self.actor_adam, masked)?;
            losses.actor = Some(loss);
            let mean_lp = sample.log_prob.mean().expect("non-empty batch");
            losses.entropy = Some(-mean_lp);
            if self.cfg.learn_temperature {
                let alpha = self.alpha();
                losses.alpha = alpha * (-mean_lp - self.target_entropy);
                let g = alpha * (-mean_lp - self.target_entropy);
                self.alpha_adam.step(&mut self.log_alpha, g);
            }
        }
        self.updates += 1;
        if self.updates % self.cfg.critic_target_update_freq == 0 {
            for i in 0..2 {
                self.targets[i].soft_update_from(&self.critics[i], self.cfg.tau);
            }
        }
        let [g0, g1]: [Array2<f64>; 2] = critic_grads.try_into().expect("two critics");
        self.last_grads = Some(InputGrads {
            actor: actor_grad.or_else(|| self.last_grads.as_mut().and_then(|g| g.actor.take())),
            critics: [g0, g1],
        });
        Ok(losses)
    }

    /// Whether the update just performed lands on the RL topology schedule.
    pub fn topology_due(&self) -> bool {
        self.dst.is_update_step(self.updates)
    }

    /// Prune and regrow the actor and critic input layers using the dense
    /// gradients of the most recent update; targets take the new masks.
    pub fn rl_topology_update(&mut self) -> Result<RlTopologyEvent> {
        let grads = self
            .last_grads
            .clone()
            .ok_or_else(|| Error::InsufficientData("no SAC update has produced gradients yet".into()))?;
        let actor_grad = grads.actor.unwrap_or_else(|| Array2::zeros(self.actor.input_layer().weights.dim()));
        let actor = dst::topology_update(self.actor.input_layer_mut(), &self.dst, Some(&actor_grad), &mut self.dst_rng)?;
        self.actor_adam.reset_positions(0, &actor.pruned);
        self.actor_adam.reset_positions(0, &actor.grown);
        let mut critics: [TopologyChange; 2] = Default::default();
        for i in 0..2 {
            let ch = dst::topology_update(
                self.critics[i].input_layer_mut(),
                &self.dst,
                Some(&grads.critics[i]),
                &mut self.dst_rng,
            )?;
            self.critic_adam[i].reset_positions(0, &ch.pruned);
            self.critic_adam[i].reset_positions(0, &ch.grown);
            let mask = self.critics[i].input_layer().mask.clone();
            let target = self.targets[i].input_layer_mut();
            target.mask = mask;
            target.apply_mask();
            critics[i] = ch;
        }
        Ok(RlTopologyEvent {
            update: self.updates,
            actor,
            critics,
        })
    }

    /// Fresh critics, targets and critic optimizers, keeping the actor.
    /// Used once the agent switches from intrinsic to learned rewards.
    pub fn reset_critics(&mut self, seed: u64) -> Result<()> {
        let critic_widths = widths(self.obs_dim + self.act_dim, &self.cfg.hidden, 1);
        for i in 0..2 {
            let mut c = Network::init(&critic_widths, Activation::Relu, rng::derive_seed(seed, "critic-reset", i as u64))?;
            // keep the current sparse topology
            if let Some(mask) = self.critics[i].input_layer().mask.clone() {
                c.input_layer_mut().set_mask(mask)?;
            }
            self.critic_adam[i] = AdamState::with_betas(&c, self.cfg.critic_lr, self.cfg.beta1, self.cfg.beta2);
            self.targets[i] = c.clone();
            self.critics[i] = c;
        }
        if let Some(g) = self.last_grads.as_mut() {
            for c in g.critics.iter_mut() {
                c.fill(0.0);
            }
        }
        Ok(())
    }

    /// Gradient bundles of the critic loss for a batch against fixed targets.
    pub fn critic_loss_grads(&self, critic: usize, batch: &Batch, y: &Array1<f64>) -> Result<(f64, GradientBundle)> {
        let n = batch.rewards.len();
        let x = concat_cols(batch.obs.view(), batch.actions.view());
        let cache = self.critics[critic].forward(x.view())?;
        let q = cache.output();
        let diff = &q.column(0) - y;
        let loss = diff.mapv(|e| e * e).sum() / n as f64;
        let g = diff.mapv(|e| 2.0 * e / n as f64).insert_axis(Axis(1));
        Ok((loss, self.critics[critic].backward(&cache, g.view())?.0))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Critic input concatenation, exposed for tests and the harness.
    pub fn critic_input(obs: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
        concat_cols(obs, actions)
    }

    /// True when every target masked position matches its online critic.
    pub fn targets_mirror_masks(&self) -> bool {
        self.critics.iter().zip(&self.targets).all(|(c, t)| {
            let (cm, tm) = (&c.input_layer().mask, &t.input_layer().mask);
            cm == tm
                && match tm {
                    None => true,
                    Some(m) => {
                        let mut ok = true;
                        Zip::from(m.as_array()).and(&t.input_layer().weights).for_each(|&k, &w| {
                            if !k && w != 0.0 {
                                ok = false;
                            }
                        });
                        ok
                    }
                }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use approx::assert_abs_diff_eq;

    fn batch(n: usize, obs: usize, act: usize, seed: u64) -> Batch {
        let mut r = rng::stream(seed, "batch", 0);
        Batch {
            obs: dst::uniform_matrix((n, obs), 1.0, &mut r),
            actions: dst::uniform_matrix((n, act), 1.0, &mut r),
            next_obs: dst::uniform_matrix((n, obs), 1.0, &mut r),
            rewards: Array1::from_shape_fn(n, |i| (i as f64 * 0.37).sin()),
            terminal: Array1::zeros(n),
        }
    }

    fn small_cfg() -> SacConfig {
        SacConfig {
            hidden: vec![16, 16],
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn actions_stay_in_bounds_and_greedy_is_deterministic() {
        let mut a = SacAgent::new(4, 2, 2.0, &small_cfg(), &DstConfig::default(), 3).unwrap();
        let mut r = rng::stream(0, "obs", 0);
        for _ in 0..200 {
            let o = dst::uniform_matrix((1, 4), 50.0, &mut r);
            for det in [false, true] {
                let act = a.act(o.row(0).as_slice().unwrap(), det).unwrap();
                assert!(act.iter().all(|x| x.abs() <= 2.0));
            }
        }
        let o = [0.1, -0.2, 0.3, 0.0];
        assert_eq!(a.act(&o, true).unwrap(), a.act(&o, true).unwrap());
        assert_eq!(a.act_greedy(&o).unwrap(), a.act(&o, true).unwrap());
    }

    #[test]
    fn stochastic_actions_vary() {
        let mut a = SacAgent::new(3, 1, 1.0, &small_cfg(), &DstConfig::default(), 4).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| a.act(&[0.0, 0.5, -0.5], false).unwrap()[0]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(var > 1e-3, "variance {var}");
    }

    #[test]
    fn zero_discount_target_is_reward() {
        let cfg = SacConfig {
            discount: 0.0,
            ..small_cfg()
        };
        let mut a = SacAgent::new(3, 1, 1.0, &cfg, &DstConfig::default(), 5).unwrap();
        let mut b = batch(6, 3, 1, 1);
        b.rewards.fill(0.0);
        assert_eq!(a.critic_targets(&b).unwrap(), Array1::<f64>::zeros(6));
    }

    #[test]
    fn zero_reward_target_is_soft_value() {
        let mut a = SacAgent::new(3, 1, 1.0, &small_cfg(), &DstConfig::default(), 5).unwrap();
        // flatten target critics so the soft value reduces to the entropy term
        for t in a.targets.iter_mut() {
            for l in t.layers_mut() {
                l.weights.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        let mut b = batch(6, 3, 1, 1);
        b.rewards.fill(0.0);
        let mut probe = a.clone();
        let y = a.critic_targets(&b).unwrap();
        let next = probe.sample_policy(b.next_obs.view()).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(y[i], -0.99 * a.alpha() * next.log_prob[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn critic_loss_decreases_on_fixed_batch() {
        let cfg = SacConfig {
            critic_lr: 1e-3,
            ..small_cfg()
        };
        let mut a = SacAgent::new(3, 1, 1.0, &cfg, &DstConfig::default(), 6).unwrap();
        let b = batch(32, 3, 1, 2);
        let y = b.rewards.clone();
        let (first, _) = a.critic_loss_grads(0, &b, &y).unwrap();
        for _ in 0..100 {
            let (_, g) = a.critic_loss_grads(0, &b, &y).unwrap();
            adam_step(&mut a.critics[0], &g, &mut a.critic_adam[0], false).unwrap();
        }
        let (last, _) = a.critic_loss_grads(0, &b, &y).unwrap();
        assert!(last < first, "{last} >= {first}");
    }

    #[test]
    fn critic_gradients_pass_finite_differences() {
        // dense: a hidden unit with every input masked sits exactly on the ReLU kink
        let mut a = SacAgent::new(3, 2, 1.0, &small_cfg(), &DstConfig::default(), 7).unwrap();
        let b = batch(2, 3, 2, 3);
        let y = a.critic_targets(&b).unwrap();
        let x = SacAgent::critic_input(b.obs.view(), b.actions.view());
        let probe = |out: &Array2<f64>| {
            let d = &out.column(0) - &y;
            let loss = d.mapv(|e| e * e).sum() / 2.0;
            (loss, d.mapv(|e| e).insert_axis(Axis(1)))
        };
        let err = finite_diff_check(&a.critics[0], x.view(), probe, 1e-6).unwrap();
        assert!(err < 1e-4, "critic error {err}");
    }

    #[test]
    fn actor_gradients_pass_finite_differences() {
        for seed in 0..5 {
            let a = SacAgent::new(3, 2, 1.5, &small_cfg(), &DstConfig::default(), seed).unwrap();
            let b = batch(2, 3, 2, seed + 10);
            let eps = dst::uniform_matrix((2, 2), 1.0, &mut rng::stream(seed, "eps", 0));
            let obs = b.obs.clone();
            let probe = |out: &Array2<f64>| {
                let (l, g, _) = a.actor_loss_from_output(obs.view(), out.view(), &eps).unwrap();
                (l, g)
            };
            let err = finite_diff_check(&a.actor, obs.view(), probe, 1e-6).unwrap();
            assert!(err < 1e-4, "seed {seed}: actor error {err}");
        }
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let a = SacAgent::new(2, 1, 1.0, &small_cfg(), &DstConfig::default(), 8).unwrap();
        let out = ndarray::array![[0.3, -0.2]];
        let eps = ndarray::array![[0.7]];
        let s = a.sample_from_output(out.view(), eps);
        let ls = a.log_std(-0.2);
        let u: f64 = 0.3 + ls.exp() * 0.7;
        let gauss = -0.5 * 0.49 - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let expected = gauss - (1.0 - u.tanh().powi(2)).ln();
        assert_abs_diff_eq!(s.log_prob[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(log_one_minus_tanh_sq(30.0), -60.0 + 2.0 * std::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn sparse_updates_conserve_masks_and_mirror_targets() {
        let cfg = SacConfig {
            hidden: vec![8],
            ..small_cfg()
        };
        let dst = DstConfig {
            update_period: 10,
            ..DstConfig::rl_rigl()
        };
        let mut a = SacAgent::new(6, 1, 1.0, &cfg, &dst, 9).unwrap();
        let counts = |a: &SacAgent| {
            (a.actor.input_active_count(), a.critics[0].input_active_count(), a.critics[1].input_active_count())
        };
        let before = counts(&a);
        let b = batch(16, 6, 1, 4);
        let mut events = 0;
        for _ in 0..100 {
            a.update(&b).unwrap();
            if a.topology_due() {
                a.rl_topology_update().unwrap();
                events += 1;
            }
            assert!(a.targets_mirror_masks());
            assert_eq!(counts(&a), before);
        }
        assert_eq!(events, 10);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut a = SacAgent::new(3, 1, 1.0, &small_cfg(), &DstConfig::rl_rigl(), 10).unwrap();
        let b = batch(8, 3, 1, 5);
        for _ in 0..3 {
            a.update(&b).unwrap();
        }
        let mut c = SacAgent::from_json(&a.to_json().unwrap()).unwrap();
        let la = a.update(&b).unwrap();
        let lc = c.update(&b).unwrap();
        assert_eq!(la, lc);
        assert_eq!(a.act(&[0.1, 0.2, 0.3], false).unwrap(), c.act(&[0.1, 0.2, 0.3], false).unwrap());
    }

    #[test]
    fn reward_only_rules_rejected_on_rl_side() {
        let r = SacAgent::new(3, 1, 1.0, &small_cfg(), &DstConfig::with_rule(DstRule::L1), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
