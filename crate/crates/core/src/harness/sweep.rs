//! Grid sweeps over noise fraction, feedback budget, or which sides use DST.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dst::{DstConfig, DstRule};
use crate::error::{Error, Result};

use super::config::{RunConfig, WrapperKind};
use super::run::{run_experiment, RunLog};

pub const NOISE_GRID: [f64; 6] = [0.0, 0.2, 0.5, 0.7, 0.9, 0.95];
pub const BUDGET_GRID: [usize; 7] = [100, 200, 400, 1000, 2000, 4000, 10_000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Seeds only.
    None,
    /// Noise fractions at budget 1000.
    Noise,
    /// Feedback budgets at noise fraction 0.9.
    Feedback,
    /// DST on both sides, reward side only, RL side only, neither.
    Ablation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

fn with_noise(mut cfg: RunConfig, nf: f64) -> RunConfig {
    if cfg.wrapper.kind == WrapperKind::None {
        cfg.wrapper.kind = WrapperKind::Ene;
    }
    cfg.wrapper.noise_fraction = nf;
    cfg
}

fn masked_or(d: &DstConfig, fallback: DstConfig) -> DstConfig {
    if d.rule == DstRule::R2nRigl {
        d.clone()
    } else {
        fallback
    }
}

/// The four DST arms built from `base`, keeping its noise and budget.
/// RigL knobs come from `base` when it already uses RigL on that side.
pub fn dst_arms(base: &RunConfig) -> Vec<Cell> {
    let reward = masked_or(&base.reward_dst, DstConfig::reward_rigl());
    let rl = masked_or(&base.rl_dst, DstConfig::rl_rigl());
    let dense = DstConfig::default();
    [
        ("both", reward.clone(), rl.clone()),
        ("reward_only", reward, dense.clone()),
        ("rl_only", dense.clone(), rl),
        ("neither", dense.clone(), dense),
    ]
    .into_iter()
    .map(|(name, reward_dst, rl_dst)| Cell {
        name: name.to_string(),
        config: RunConfig {
            label: name.to_string(),
            reward_dst,
            rl_dst,
            ..base.clone()
        },
    })
    .collect()
}

impl Grid {
    pub fn cells(self, base: &RunConfig) -> Vec<Cell> {
        match self {
            Grid::None => vec![Cell {
                name: "base".into(),
                config: base.clone(),
            }],
            Grid::Noise => NOISE_GRID
                .iter()
                .map(|&nf| {
                    let mut cfg = with_noise(base.clone(), nf);
                    cfg.feedback.budget = 1000;
                    cfg.label = format!("nf_{nf}");
                    Cell {
                        name: cfg.label.clone(),
                        config: cfg,
                    }
                })
                .collect(),
            Grid::Feedback => BUDGET_GRID
                .iter()
                .map(|&budget| {
                    let mut cfg = with_noise(base.clone(), 0.9);
                    cfg.feedback.budget = budget;
                    cfg.label = format!("budget_{budget}");
                    Cell {
                        name: cfg.label.clone(),
                        config: cfg,
                    }
                })
                .collect(),
            Grid::Ablation => {
                let mut cfg = with_noise(base.clone(), 0.9);
                cfg.feedback.budget = 1000;
                dst_arms(&cfg)
            }
        }
    }
}

/// One scheduled run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub cell: String,
    pub seed_index: usize,
    pub config: RunConfig,
    pub dir: PathBuf,
}

/// Expand cells into `seeds` runs each, with seeds `base.seed + i` and
/// directories `out/<cell>/seed<i>`.
pub fn plan(cells: &[Cell], seeds: usize, out: &Path) -> Vec<Job> {
    cells
        .iter()
        .flat_map(|c| {
            (0..seeds).map(move |i| {
                let mut config = c.config.clone();
                config.seed = c.config.seed + i as u64;
                Job {
                    cell: c.name.clone(),
                    seed_index: i,
                    config,
                    dir: out.join(&c.name).join(format!("seed{i}")),
                }
            })
        })
        .collect()
}

/// Run every job on a pool of `jobs` threads. Results come back in plan order.
pub fn run_jobs(plan: &[Job], jobs: usize, write: bool) -> Result<Vec<RunLog>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| {
        use rayon::prelude::*;
        plan.par_iter()
            .map(|j| run_experiment(&j.config, write.then_some(j.dir.as_path())))
            .collect()
    })
}
