//! One seeded experiment: pretraining, the preference loop, evaluation and logging.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::agent::{
    knn_intrinsic_rewards, random_action, relabel_replay, Collector, ReplayBuffer, RewardColumn, SacAgent,
};
use crate::dst::{connectivity_stats, DstConfig};
use crate::envs::{collect_feature_bank, ene_wrap, imitating_wrap, Env, EnvSpec, FeatureBank, Pendulum, SyntheticEnv};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::preference::{
    sample_segment_pairs, teacher_label, PreferenceDataset, PreferencePair, RewardEnsemble,
};
use crate::rng::{self, derive_seed};

use super::config::{EnvName, RunConfig, WrapperKind};
use super::stats::auc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityRow {
    pub step: u64,
    pub network: String,
    pub avg_relevant: f64,
    pub avg_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub step: u64,
    /// Cumulative teacher queries after this session.
    pub queries_used: usize,
    pub final_ce: Vec<f64>,
    pub topology_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: RunConfig,
    pub evals: Vec<EvalPoint>,
    pub connectivity: Vec<ConnectivityRow>,
    pub sessions: Vec<SessionRecord>,
    pub total_queries: usize,
    pub rl_topology_updates: usize,
    pub reward_topology_updates: usize,
    pub clipped_actions: u64,
    pub wall_clock_secs: f64,
}

impl RunLog {
    pub fn auc(&self) -> Result<f64> {
        auc(&self.eval_curve())
    }

    pub fn eval_curve(&self) -> Vec<(f64, f64)> {
        self.evals.iter().map(|e| (e.step as f64, e.mean_return)).collect()
    }

    pub fn final_return(&self) -> Option<f64> {
        self.evals.last().map(|e| e.mean_return)
    }
}

/// The environment for one run, plus the bank it may share with eval copies.
pub struct EnvFactory {
    cfg: RunConfig,
    bank: Option<Arc<FeatureBank>>,
}

fn base_env(cfg: &RunConfig) -> Result<Box<dyn Env>> {
    Ok(match cfg.env.name {
        EnvName::Pendulum => Box::new(Pendulum::new()),
        EnvName::Synthetic => Box::new(SyntheticEnv::new(
            cfg.env.relevant_dims,
            cfg.env.action_dim,
            derive_seed(cfg.seed, "synthetic-weights", 0),
        )?),
    })
}

impl EnvFactory {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let bank = match cfg.wrapper.kind {
            WrapperKind::Imitating => Some(Arc::new(build_feature_bank(cfg)?)),
            _ => None,
        };
        Ok(EnvFactory { cfg: cfg.clone(), bank })
    }

    /// Environment whose noise stream is keyed by `stream`.
    pub fn make(&self, stream: &str) -> Result<Box<dyn Env>> {
        let base = base_env(&self.cfg)?;
        let seed = derive_seed(self.cfg.seed, stream, 0);
        let nf = self.cfg.wrapper.noise_fraction;
        Ok(match self.cfg.wrapper.kind {
            WrapperKind::None => base,
            WrapperKind::Ene => Box::new(ene_wrap(base, nf, seed)?),
            WrapperKind::Imitating => Box::new(imitating_wrap(
                base,
                Arc::clone(self.bank.as_ref().expect("bank built for imitating noise")),
                nf,
                seed,
            )?),
        })
    }

    pub fn bank(&self) -> Option<&Arc<FeatureBank>> {
        self.bank.as_ref()
    }
}

/// Record state features from a policy on the noise-free task. The policy is
/// SAC trained on the true reward for `bank_policy_steps`, or uniform random.
pub fn build_feature_bank(cfg: &RunConfig) -> Result<FeatureBank> {
    let w = &cfg.wrapper;
    let mut env = base_env(cfg)?;
    let spec = env.spec().clone();
    let bank_seed = derive_seed(cfg.seed, "bank", 0);
    if w.bank_policy_steps == 0 {
        let mut r = rng::stream(bank_seed, "policy", 0);
        return collect_feature_bank(
            &mut env,
            |_| random_action(spec.action_dim, spec.action_bound, &mut r),
            w.bank_steps,
            bank_seed,
        );
    }
    let mut agent = train_oracle_policy(cfg, w.bank_policy_steps)?;
    collect_feature_bank(&mut env, |s| agent.act(s, false).expect("state width matches"), w.bank_steps, bank_seed)
}

/// Plain dense SAC on the ground-truth reward of the noise-free task.
fn train_oracle_policy(cfg: &RunConfig, steps: u64) -> Result<SacAgent> {
    let env = base_env(cfg)?;
    let spec = env.spec().clone();
    let seed = derive_seed(cfg.seed, "bank-policy", 0);
    let mut agent = SacAgent::new(spec.state_dim, spec.action_dim, spec.action_bound, &cfg.sac, &DstConfig::default(), seed)?;
    let mut collector = Collector::new(env, seed);
    let mut replay = ReplayBuffer::new(cfg.schedule.replay_capacity, spec.state_dim, spec.action_dim);
    let mut r = rng::stream(seed, "bank-batches", 0);
    for t in 1..=steps {
        let obs = collector.obs().to_vec();
        let a = if t <= cfg.schedule.initial_collect {
            random_action(spec.action_dim, spec.action_bound, &mut r)
        } else {
            agent.act(&obs, false)?
        };
        let (tr, ep) = collector.step(&a);
        replay.push(&tr, ep, tr.reward);
        if t > cfg.schedule.initial_collect {
            let idx = replay.sample_indices(cfg.sac.batch_size, &mut r)?;
            agent.update(&replay.batch(&idx, RewardColumn::GroundTruth))?;
        }
    }
    Ok(agent)
}

/// Greedy evaluation on the ground-truth reward. Episode seeds derive from
/// the run seed and `step`, so the same agent at the same step always
/// scores identically.
pub fn evaluate(agent: &SacAgent, env: &mut dyn Env, run_seed: u64, step: u64, episodes: usize) -> Result<EvalPoint> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let horizon = env.spec().episode_len;
    let mut returns = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut obs = env.reset(derive_seed(run_seed, "eval", step * episodes as u64 + e as u64));
        let mut total = 0.0;
        for _ in 0..horizon {
            let tr = env.step(&agent.act_greedy(&obs)?);
            total += tr.reward;
            if tr.done {
                break;
            }
            obs = tr.next_state;
        }
        returns.push(total);
    }
    Ok(EvalPoint {
        step,
        mean_return: returns.iter().sum::<f64>() / episodes as f64,
        returns,
    })
}

/// Relevant inputs of networks that see `(state, action)`: relevant state
/// features and every action column.
fn state_action_relevant(spec: &EnvSpec) -> Vec<usize> {
    let mut r = spec.relevant.clone();
    r.extend(spec.state_dim..spec.state_dim + spec.action_dim);
    r
}

struct Logger<'a> {
    spec: &'a EnvSpec,
    rows: Vec<ConnectivityRow>,
}

impl Logger<'_> {
    fn record(&mut self, step: u64, name: &str, net: &Network, state_only: bool) -> Result<()> {
        let relevant = if state_only {
            self.spec.relevant.clone()
        } else {
            state_action_relevant(self.spec)
        };
        let rep = connectivity_stats(net.input_layer(), &relevant, step)?;
        self.rows.push(ConnectivityRow {
            step,
            network: name.to_string(),
            avg_relevant: rep.avg_relevant,
            avg_noise: rep.avg_noise,
        });
        Ok(())
    }

    fn agent(&mut self, step: u64, agent: &SacAgent) -> Result<()> {
        self.record(step, "actor", &agent.actor, true)?;
        self.record(step, "critic0", &agent.critics[0], false)?;
        self.record(step, "critic1", &agent.critics[1], false)
    }

    fn reward(&mut self, step: u64, ens: &RewardEnsemble, members: impl Iterator<Item = usize>) -> Result<()> {
        for i in members {
            self.record(step, &format!("reward{i}"), &ens.members()[i].net, false)?;
        }
        Ok(())
    }
}

/// Run one experiment and, when `out_dir` is given, write its CSV files and `meta.json`.
pub fn run_experiment(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunLog> {
    cfg.validate()?;
    let started = Instant::now();
    let sched = &cfg.schedule;
    let fb = &cfg.feedback;
    let factory = EnvFactory::new(cfg)?;
    let env = factory.make("train-env")?;
    let mut eval_env = factory.make("eval-env")?;
    let spec = env.spec().clone();
    let (obs_dim, act_dim) = (spec.state_dim, spec.action_dim);
    let reward_in = obs_dim + act_dim;

    let mut agent = SacAgent::new(obs_dim, act_dim, spec.action_bound, &cfg.sac, &cfg.rl_dst, derive_seed(cfg.seed, "agent", 0))?;
    let mut ensemble = RewardEnsemble::new(reward_in, &cfg.reward_model, &cfg.reward_dst, derive_seed(cfg.seed, "reward", 0))?;
    let mut dataset = PreferenceDataset::new(cfg.reward_model.capacity);
    let mut replay = ReplayBuffer::new(sched.replay_capacity, obs_dim, act_dim);
    let mut collector = Collector::new(env, derive_seed(cfg.seed, "train-episodes", 0));
    let mut action_rng = rng::stream(cfg.seed, "initial-actions", 0);
    let mut batch_rng = rng::stream(cfg.seed, "batches", 0);
    let mut teacher_rng = rng::stream(cfg.seed, "teacher", 0);
    let mut knn_rng = rng::stream(cfg.seed, "knn", 0);

    let mut logger = Logger { spec: &spec, rows: Vec::new() };
    logger.agent(0, &agent)?;
    if !fb.oracle {
        logger.reward(0, &ensemble, 0..ensemble.members().len())?;
    }

    let pretrain_end = if fb.oracle { sched.initial_collect } else { sched.initial_collect + sched.unsup_steps };
    let per_session = fb.queries_per_session();
    let mut queries_used = 0usize;
    let mut sessions = Vec::new();
    let mut evals = vec![evaluate(&agent, eval_env.as_mut(), cfg.seed, 0, sched.eval_episodes)?];
    let mut rl_updates = 0usize;
    let mut reward_updates = 0usize;

    for t in 1..=sched.total_steps {
        let obs = collector.obs().to_vec();
        let action = if t <= sched.initial_collect {
            random_action(act_dim, spec.action_bound, &mut action_rng)
        } else {
            agent.act(&obs, false)?
        };
        let (tr, ep) = collector.step(&action);
        let relabeled = if fb.oracle {
            tr.reward
        } else if ensemble.is_trained() {
            let (m, s) = ensemble.reward_infer(&tr.state, &tr.action)?;
            if fb.rune {
                m + fb.rune_schedule.beta(t) * s
            } else {
                m
            }
        } else {
            0.0
        };
        replay.push(&tr, ep, relabeled);

        if t > sched.initial_collect {
            let idx = replay.sample_indices(cfg.sac.batch_size, &mut batch_rng)?;
            let batch = if fb.oracle {
                replay.batch(&idx, RewardColumn::GroundTruth)
            } else if t <= pretrain_end {
                let mut b = replay.batch(&idx, RewardColumn::Relabeled);
                b.rewards = knn_intrinsic_rewards(&replay, &b.obs, 5, 512, &mut knn_rng)?;
                b
            } else {
                replay.batch(&idx, RewardColumn::Relabeled)
            };
            agent.update(&batch)?;
            if agent.topology_due() {
                agent.rl_topology_update()?;
                rl_updates += 1;
                logger.agent(t, &agent)?;
            }
        }

        if !fb.oracle && t >= pretrain_end && t % fb.frequency == 0 && queries_used < fb.budget {
            if sessions.is_empty() {
                agent.reset_critics(derive_seed(cfg.seed, "critic-reset", 0))?;
            }
            let q = per_session.min(fb.budget - queries_used);
            match sample_segment_pairs(&replay, fb.segment_len, q, &mut teacher_rng) {
                Ok(pairs) => {
                    for (a, b) in pairs {
                        let label = teacher_label(&a, &b);
                        dataset.push(PreferencePair { first: a, second: b, label });
                    }
                    queries_used += q;
                    let report = ensemble.train(&dataset, cfg.reward_model.epochs, cfg.reward_model.batch_size)?;
                    let rune = fb.rune.then_some((&fb.rune_schedule, t));
                    relabel_replay(&mut replay, &ensemble, rune)?;
                    let mut touched: Vec<usize> = report.topology_events.iter().map(|e| e.member).collect();
                    touched.dedup();
                    reward_updates += report.topology_events.len();
                    logger.reward(t, &ensemble, touched.into_iter())?;
                    debug!("step {t}: session with {q} queries, ce {:?}", report.final_ce);
                    sessions.push(SessionRecord {
                        step: t,
                        queries_used,
                        final_ce: report.final_ce,
                        topology_updates: report.topology_events.len(),
                    });
                }
                Err(Error::InsufficientData(msg)) => debug!("step {t}: skipping session: {msg}"),
                Err(e) => return Err(e),
            }
        }

        if t % sched.eval_interval == 0 {
            let point = evaluate(&agent, eval_env.as_mut(), cfg.seed, t, sched.eval_episodes)?;
            info!("seed {} step {t}: eval return {:.2}", cfg.seed, point.mean_return);
            evals.push(point);
            logger.agent(t, &agent)?;
            if !fb.oracle {
                logger.reward(t, &ensemble, 0..ensemble.members().len())?;
            }
        }
    }

    let log = RunLog {
        config: cfg.clone(),
        evals,
        connectivity: logger.rows,
        sessions,
        total_queries: queries_used,
        rl_topology_updates: rl_updates,
        reward_topology_updates: reward_updates,
        clipped_actions: collector.env().clipped_actions(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        write_run(&log, dir)?;
        if sched.save_checkpoint {
            let path = dir.join("agent.json");
            fs::write(&path, agent.to_json()?).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(log)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Write `evals.csv`, `connectivity.csv`, `sessions.csv` and `meta.json` into `dir`.
pub fn write_run(log: &RunLog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("evals.csv");
    let mut w = csv_writer(&path)?;
    let episodes = log.config.schedule.eval_episodes;
    let mut header = vec!["step".to_string(), "mean_return".to_string()];
    header.extend((0..episodes).map(|i| format!("ep{i}")));
    w.write_record(&header).map_err(csv_err(&path))?;
    for e in &log.evals {
        let mut row = vec![e.step.to_string(), e.mean_return.to_string()];
        row.extend(e.returns.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("connectivity.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["step", "network", "avg_relevant", "avg_noise"]).map_err(csv_err(&path))?;
    for c in &log.connectivity {
        w.write_record([c.step.to_string(), c.network.clone(), c.avg_relevant.to_string(), c.avg_noise.to_string()])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("sessions.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["step".to_string(), "queries_used".to_string()];
    header.extend((0..log.config.reward_model.ensemble_size).map(|i| format!("final_ce{i}")));
    w.write_record(&header).map_err(csv_err(&path))?;
    for s in &log.sessions {
        let mut row = vec![s.step.to_string(), s.queries_used.to_string()];
        row.extend(s.final_ce.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let meta = serde_json::json!({
        "config": log.config,
        "total_queries": log.total_queries,
        "sessions": log.sessions.len(),
        "rl_topology_updates": log.rl_topology_updates,
        "reward_topology_updates": log.reward_topology_updates,
        "clipped_actions": log.clipped_actions,
        "final_return": log.final_return(),
        "auc": log.auc().ok(),
        "wall_clock_secs": log.wall_clock_secs,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Read `evals.csv` from a run directory.
pub fn read_evals(dir: &Path) -> Result<Vec<EvalPoint>> {
    let path = dir.join("evals.csv");
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(&path))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    message: format!("bad number in column {i}"),
                })
        };
        out.push(EvalPoint {
            step: num(0)? as u64,
            mean_return: num(1)?,
            returns: (2..rec.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Read `connectivity.csv` from a run directory.
pub fn read_connectivity(dir: &Path) -> Result<Vec<ConnectivityRow>> {
    let path = dir.join("connectivity.csv");
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    r.deserialize().map(|row| row.map_err(csv_err(&path))).collect()
}
