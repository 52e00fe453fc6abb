//! Run configuration, presets and config-file loading.
//!
//! A config file names a preset (`desk` or `full`) and overrides any subset
//! of its keys. Files are TOML, or JSON when the extension is `.json`. A
//! run's `meta.json` is itself a loadable config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::SacConfig;
use crate::dst::{DstConfig, DstRule};
use crate::error::{Error, Result};
use crate::preference::{RewardModelConfig, RuneSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Pendulum,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    /// Relevant state dimensions of the synthetic task.
    pub relevant_dims: usize,
    /// Action dimensions of the synthetic task.
    pub action_dim: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            name: EnvName::Pendulum,
            relevant_dims: 10,
            action_dim: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrapperKind {
    None,
    Ene,
    Imitating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WrapperConfig {
    pub kind: WrapperKind,
    pub noise_fraction: f64,
    /// Rollout steps recorded into the feature bank (imitating noise).
    pub bank_steps: usize,
    /// SAC steps on the noise-free task before recording the bank; 0 records
    /// a uniform-random policy instead.
    pub bank_policy_steps: u64,
}

impl Default for WrapperConfig {
    fn default() -> Self {
        WrapperConfig {
            kind: WrapperKind::Ene,
            noise_fraction: 0.9,
            bank_steps: 10_000,
            bank_policy_steps: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    /// Total teacher queries allowed.
    pub budget: usize,
    /// Environment steps between reward-learning sessions.
    pub frequency: u64,
    pub segment_len: usize,
    /// Train SAC on the ground-truth reward; no preference machinery.
    pub oracle: bool,
    pub rune: bool,
    pub rune_schedule: RuneSchedule,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            budget: 200,
            frequency: 1000,
            segment_len: 50,
            oracle: false,
            rune: false,
            rune_schedule: RuneSchedule::default(),
        }
    }
}

impl FeedbackConfig {
    /// Queries per session: `round(budget / 100)`, at least 1.
    pub fn queries_per_session(&self) -> usize {
        ((self.budget as f64 / 100.0).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    /// Uniform-random steps before any update.
    pub initial_collect: u64,
    /// State-entropy pretraining steps after the initial collect.
    pub unsup_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub replay_capacity: usize,
    /// Write `agent.json` with the final agent state.
    pub save_checkpoint: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_steps: 30_000,
            initial_collect: 1000,
            unsup_steps: 2000,
            eval_interval: 5000,
            eval_episodes: 10,
            replay_capacity: 100_000,
            save_checkpoint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Free-form label recorded in `meta.json`.
    pub label: String,
    pub env: EnvConfig,
    pub wrapper: WrapperConfig,
    pub feedback: FeedbackConfig,
    pub schedule: ScheduleConfig,
    pub sac: SacConfig,
    pub reward_model: RewardModelConfig,
    pub reward_dst: DstConfig,
    pub rl_dst: DstConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset("desk").expect("desk preset exists")
    }
}

impl RunConfig {
    /// Built-in presets. `desk` is sized for a single CPU core; `full`
    /// uses full-size networks and a 1M-step schedule.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = RunConfig {
            preset: "desk".into(),
            seed: 0,
            label: String::new(),
            env: EnvConfig::default(),
            wrapper: WrapperConfig::default(),
            feedback: FeedbackConfig::default(),
            schedule: ScheduleConfig::default(),
            sac: SacConfig::default(),
            reward_model: RewardModelConfig::default(),
            reward_dst: DstConfig::reward_rigl(),
            rl_dst: DstConfig::rl_rigl(),
        };
        match name {
            "desk" => Ok(desk),
            "full" => Ok(RunConfig {
                preset: "full".into(),
                feedback: FeedbackConfig {
                    frequency: 5000,
                    ..desk.feedback.clone()
                },
                schedule: ScheduleConfig {
                    total_steps: 1_000_000,
                    unsup_steps: 9000,
                    replay_capacity: 1_000_000,
                    ..desk.schedule.clone()
                },
                sac: SacConfig::full(),
                reward_model: RewardModelConfig::full(),
                ..desk
            }),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    /// Overlay `overrides` (a partial config tree) on the preset it names.
    pub fn from_value(overrides: toml::Value) -> Result<Self> {
        let preset = overrides
            .get("preset")
            .and_then(toml::Value::as_str)
            .unwrap_or("desk")
            .to_string();
        let base = RunConfig::preset(&preset)?;
        let mut merged = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overrides);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let v: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut v: serde_json::Value = serde_json::from_str(text)?;
        // a run's meta.json nests the config under "config"
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        let v = toml::Value::try_from(v).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        };
        parsed.map_err(|e| match e {
            Error::Config(message) | Error::Parse { message, .. } => Error::Parse {
                path: PathBuf::from(path),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if s.eval_interval == 0 || s.eval_episodes == 0 {
            return Err(Error::Config("eval_interval and eval_episodes must be positive".into()));
        }
        if s.replay_capacity < self.sac.batch_size {
            return Err(Error::Config("replay capacity is smaller than the SAC batch".into()));
        }
        if !(0.0..1.0).contains(&self.wrapper.noise_fraction) {
            return Err(Error::Config(format!(
                "noise fraction must lie in [0, 1), got {}",
                self.wrapper.noise_fraction
            )));
        }
        if self.wrapper.kind == WrapperKind::Imitating && self.wrapper.bank_steps == 0 {
            return Err(Error::Config("imitating noise needs bank_steps >= 1".into()));
        }
        if self.env.name == EnvName::Synthetic && (self.env.relevant_dims == 0 || self.env.action_dim == 0) {
            return Err(Error::Config("synthetic task needs positive dimensions".into()));
        }
        let f = &self.feedback;
        if !f.oracle {
            if f.frequency == 0 || f.segment_len == 0 {
                return Err(Error::Config("feedback frequency and segment length must be positive".into()));
            }
        }
        self.sac.validate()?;
        self.reward_model.validate()?;
        for (side, d) in [("reward", &self.reward_dst), ("rl", &self.rl_dst)] {
            if d.rule != DstRule::Dense {
                d.validate().map_err(|e| Error::Config(format!("{side}_dst: {e}")))?;
            }
        }
        if matches!(self.rl_dst.rule, DstRule::DropConnect | DstRule::L1) {
            return Err(Error::Config("rl_dst supports r2n_rigl, set, static and dense only".into()));
        }
        Ok(())
    }
}

/// Recursive table merge: scalars and arrays in `over` replace `base`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
