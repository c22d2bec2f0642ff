//! Experiment configuration, orchestration and reporting.
//!
//! A run pretrains the base chain, fine-tunes it with GRPO plus whichever
//! mechanisms are toggled on, and evaluates fixed-seed samples every
//! `eval_every` epochs. Outputs are pure functions of the config.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod verify;

pub use compare::{compare_records, compare_runs, Comparison, GainReport, Gains, ReferenceAxis};
pub use config::{EvalProtocol, ExperimentConfig, PolicyConfig};
pub use experiment::{
    fine_tune, pretrain_base, read_pareto, run_experiment, run_experiment_in_memory, write_run, EvalDetail,
    Evaluator, ParetoRecord, RunOutcome,
};
pub use verify::{run_verification, CheckResult, VerifyReport};
