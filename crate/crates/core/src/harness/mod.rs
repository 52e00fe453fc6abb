//! Experiment orchestration: configs, the interaction loop, evaluation,
//! statistics and sweeps.

mod config;
mod run;
pub mod stats;
mod sweep;

pub use config::{
    EnvConfig, EnvName, FeedbackConfig, RunConfig, ScheduleConfig, WrapperConfig, WrapperKind,
};
pub use run::{
    build_feature_bank, evaluate, read_connectivity, read_evals, run_experiment, write_run, ConnectivityRow,
    EnvFactory, EvalPoint, RunLog, SessionRecord,
};
pub use stats::{auc, welch_t, Alternative, WelchResult};
pub use sweep::{dst_arms, plan, run_jobs, Cell, Grid, Job, BUDGET_GRID, NOISE_GRID};
