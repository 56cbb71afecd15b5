//! Executes every (variant, seed) run of an experiment and writes its log.
//!
//! Per run directory: `manifest.json` first, then `metrics.csv`, then
//! `status.json`. A directory without `status.json` is a partial log.

use std::fs;
use std::path::{Path, PathBuf};

use plasticity::continual::{run_continual, TeacherProcess};
use plasticity::metrics::MetricSeries;
use plasticity::rl::run_rl_experiment;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const STATUS: &str = "status.json";

pub fn code_version() -> String {
    format!("plasticity {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub code_version: String,
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub experiment: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunStatus {
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

pub fn run_id(variant: &str, seed: u64) -> String {
    format!("{variant}-s{seed}")
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    pub aborted: Option<String>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn execute(cfg: &ExperimentConfig, variant: &str, seed: u64) -> Result<MetricSeries, CliError> {
    let run = |e: plasticity::Error| CliError::Run(format!("{}: {e}", run_id(variant, seed)));
    match cfg.kind {
        ExperimentKind::Continual => {
            let c = cfg.continual.as_ref().expect("validated");
            let v = c.variants.iter().find(|v| v.name == variant).expect("known variant");
            let tp = TeacherProcess::new(&c.teacher, seed).map_err(run)?;
            run_continual(&v.protocol, &tp).map_err(run)
        }
        ExperimentKind::Rl => {
            let r = cfg.rl.as_ref().expect("validated");
            let v = r.variants.iter().find(|v| v.name == variant).expect("known variant");
            run_rl_experiment(&v.config, &run_id(variant, seed), seed).map_err(run)
        }
    }
}

fn run_one(cfg: &ExperimentConfig, dir: &Path, variant: &str, seed: u64) -> Result<RunOutcome, CliError> {
    let id = run_id(variant, seed);
    let run_dir = dir.join(&id);
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    let status_path = run_dir.join(STATUS);
    if status_path.exists() {
        fs::remove_file(&status_path).map_err(|e| io_err(&status_path, e))?;
    }
    let manifest = Manifest {
        code_version: code_version(),
        run_id: id.clone(),
        variant: variant.into(),
        seed,
        experiment: cfg.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(&run_dir.join(MANIFEST), &text)?;

    let mut series = execute(cfg, variant, seed)?;
    series.run_id = id.clone();
    write(&run_dir.join(METRICS), &series.to_csv())?;

    let status = RunStatus { complete: true, aborted: series.aborted.clone() };
    let mut text = serde_json::to_string_pretty(&status).expect("status serializes");
    text.push('\n');
    write(&status_path, &text)?;
    Ok(RunOutcome { run_id: id, dir: run_dir, aborted: series.aborted })
}

/// Runs every (variant, seed) pair, in parallel across runs. Returns the
/// outcomes in run-id order; per-run errors are collected, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Vec<Result<RunOutcome, CliError>> {
    let mut jobs: Vec<(String, u64)> = cfg
        .variant_names()
        .into_iter()
        .flat_map(|v| cfg.seeds.iter().map(move |s| (v.to_string(), *s)))
        .collect();
    jobs.sort_by_key(|(v, s)| run_id(v, *s));
    jobs.par_iter().map(|(v, s)| run_one(cfg, dir, v, *s)).collect()
}
