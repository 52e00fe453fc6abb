use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use serde_json::json;

use r2n::harness::{
    auc, plan, read_connectivity, read_evals, run_experiment, run_jobs, welch_t, Alternative, Grid, RunConfig,
};
use r2n::{Error, Result};

/// Preference-based RL with dynamic sparse training.
#[derive(Debug, Parser)]
#[command(name = "r2n", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one seeded experiment.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "runs/run")]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of configurations over several seeds.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_enum, default_value_t = Grid::None)]
        grid: Grid,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Welch test on final return and AUC between two groups of runs.
    Stats {
        dir_a: PathBuf,
        dir_b: PathBuf,
        #[arg(long, value_enum, default_value_t = AltArg::Greater)]
        alternative: AltArg,
    },
    /// Print a run's connectivity log and final relevant/noise ratios.
    Connectivity { dir: PathBuf },
    /// Re-run a logged experiment and check its evaluations match bit for bit.
    Replay {
        /// Run directory or its meta.json.
        runlog: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum AltArg {
    Greater,
    Less,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Run { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let log = run_experiment(&cfg, Some(&out))?;
            println!(
                "{}",
                json!({
                    "out": out,
                    "final_return": log.final_return(),
                    "auc": log.auc().ok(),
                    "total_queries": log.total_queries,
                    "wall_clock_secs": log.wall_clock_secs,
                })
            );
        }
        Command::Sweep { config, seeds, grid, jobs, out } => {
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be at least 1".into()));
            }
            let cfg = RunConfig::load(&config)?;
            let jobs_plan = plan(&grid.cells(&cfg), seeds, &out);
            let logs = run_jobs(&jobs_plan, jobs, true)?;
            for (j, log) in jobs_plan.iter().zip(&logs) {
                println!(
                    "{}",
                    json!({
                        "cell": j.cell,
                        "seed": j.config.seed,
                        "dir": j.dir,
                        "final_return": log.final_return(),
                        "auc": log.auc().ok(),
                    })
                );
            }
        }
        Command::Stats { dir_a, dir_b, alternative } => {
            let alt = match alternative {
                AltArg::Greater => Alternative::Greater,
                AltArg::Less => Alternative::Less,
            };
            let a = group_metrics(&dir_a)?;
            let b = group_metrics(&dir_b)?;
            let test = |x: &[f64], y: &[f64]| -> std::result::Result<serde_json::Value, Failure> {
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let base = json!({ "n_a": x.len(), "n_b": y.len(), "mean_a": mean(x), "mean_b": mean(y) });
                let mut obj = base.as_object().cloned().unwrap_or_default();
                match welch_t(x, y, alt) {
                    Ok(r) => {
                        obj.insert("t".into(), json!(r.t));
                        obj.insert("df".into(), json!(r.df));
                        obj.insert("p".into(), json!(r.p));
                        obj.insert("degenerate".into(), json!(false));
                    }
                    Err(Error::Degenerate(msg)) | Err(Error::InsufficientData(msg)) => {
                        obj.insert("degenerate".into(), json!(true));
                        obj.insert("note".into(), json!(msg));
                    }
                    Err(e) => return Err(e.into()),
                }
                Ok(serde_json::Value::Object(obj))
            };
            let report = json!({
                "alternative": match alt { Alternative::Greater => "greater", Alternative::Less => "less" },
                "final_return": test(&a.0, &b.0)?,
                "auc": test(&a.1, &b.1)?,
            });
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
        }
        Command::Connectivity { dir } => {
            let rows = read_connectivity(&dir)?;
            println!("step,network,avg_relevant,avg_noise");
            for r in &rows {
                println!("{},{},{},{}", r.step, r.network, r.avg_relevant, r.avg_noise);
            }
            let mut last: Vec<&r2n::harness::ConnectivityRow> = Vec::new();
            for r in &rows {
                match last.iter_mut().find(|x| x.network == r.network) {
                    Some(slot) => *slot = r,
                    None => last.push(r),
                }
            }
            for r in last {
                let ratio = if r.avg_noise > 0.0 { r.avg_relevant / r.avg_noise } else { f64::INFINITY };
                eprintln!("{}: step {} relevant/noise ratio {:.3}", r.network, r.step, ratio);
            }
        }
        Command::Replay { runlog, out } => {
            let (dir, meta) = if runlog.is_dir() {
                (runlog.clone(), runlog.join("meta.json"))
            } else {
                (runlog.parent().map(Path::to_path_buf).unwrap_or_default(), runlog.clone())
            };
            let cfg = RunConfig::load(&meta)?;
            let original = read_evals(&dir)?;
            let scratch;
            let target = match out {
                Some(o) => o,
                None => {
                    scratch = std::env::temp_dir().join(format!("r2n-replay-{}", std::process::id()));
                    scratch.clone()
                }
            };
            run_experiment(&cfg, Some(&target))?;
            let replayed = read_evals(&target)?;
            let identical = original == replayed;
            println!("{}", json!({ "eval_points": original.len(), "identical": identical, "replay_dir": target }));
            if !identical {
                return Err(Failure::Runtime(Error::Degenerate(
                    "replayed evaluations differ from the log".into(),
                )));
            }
        }
    }
    Ok(())
}

/// Run directories under `root` (any directory holding `evals.csv`), sorted.
fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if root.join("evals.csv").is_file() {
        found.push(root.to_path_buf());
        return Ok(found);
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for d in subdirs {
        found.extend(run_dirs(&d)?);
    }
    Ok(found)
}

/// Final returns and AUCs of every run under `root`.
fn group_metrics(root: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let dirs = run_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::InsufficientData(format!("no runs found under {}", root.display())));
    }
    let mut finals = Vec::new();
    let mut aucs = Vec::new();
    for d in dirs {
        let evals = read_evals(&d)?;
        let pts: Vec<(f64, f64)> = evals.iter().map(|e| (e.step as f64, e.mean_return)).collect();
        finals.push(evals.last().map(|e| e.mean_return).unwrap_or(f64::NAN));
        aucs.push(auc(&pts)?);
    }
    Ok((finals, aucs))
}
