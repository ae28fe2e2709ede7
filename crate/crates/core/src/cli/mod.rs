//! Batch experiment runner: line-oriented config files, seeded runs with
//! multi-seed repeats and parameter sweeps, per-round CSV output and a
//! per-run summary document.

mod config;
mod runner;

pub use config::{
    parse_config_file, resolve, AttackKind, AttackSection, DataSection, ExperimentConfig,
    ModelSection, RawConfig,
};
pub use runner::{execute_run, run, validate, RunArtifacts, RunOptions};
