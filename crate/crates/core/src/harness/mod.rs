//! Experiment driver: deterministic (config, seed) runs of the four study
//! setups, shared truth/observation sequences across filters, and plot-ready
//! CSV/JSON outputs.

pub mod config;
mod double_well;
mod langevin;
mod lorenz;
pub mod output;
mod single_bayes;

pub use config::{Experiment, ExperimentConfig, FilterName, FilterSpec, CONFIG_VERSION};
pub use double_well::run_table1;
pub use lorenz::{run_lorenz_sweep, SweepGrid};
pub use single_bayes::{analytic_posterior_1d, histogram_l1, single_bayes_prior};

use crate::error::Result;
use serde::Serialize;
use std::time::Instant;

/// One CSV file to be written alongside the summary.
#[derive(Debug, Clone)]
pub struct CsvTable {
    /// File stem; the writer appends `.csv`.
    pub name: String,
    pub header: String,
    pub rows: Vec<String>,
}

impl CsvTable {
    pub fn new(name: impl Into<String>, header: impl Into<String>) -> Self {
        CsvTable {
            name: name.into(),
            header: header.into(),
            rows: Vec::new(),
        }
    }
}

/// Result of one filter within one run. `rms` is the experiment's headline
/// metric: distance to the exact-filter mean for the double-well setup,
/// histogram distance to the analytic posterior for the single Bayes step,
/// and distance to the truth otherwise. Non-finite values mark runs that
/// diverged or aborted and serialize as JSON null.
#[derive(Debug, Clone, Serialize)]
pub struct FilterOutcome {
    pub filter: String,
    pub m: usize,
    pub r: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inflation: Option<f64>,
    pub rms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rms_truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rms_fp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posterior_l1: Option<f64>,
    /// Fraction of assimilation events that used more than one mixture
    /// component.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2_fraction: Option<f64>,
}

impl FilterOutcome {
    pub fn new(filter: impl Into<String>, m: usize, r: f64, rms: f64) -> Self {
        FilterOutcome {
            filter: filter.into(),
            m,
            r,
            c: None,
            inflation: None,
            rms,
            rms_truth: None,
            rms_fp: None,
            posterior_l1: None,
            l2_fraction: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub outcomes: Vec<FilterOutcome>,
}

/// Everything one invocation produced: a config echo, per-seed reports, and
/// the measured wall time (the only field that varies between identical
/// reruns).
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub reports: Vec<RunReport>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub tables: Vec<CsvTable>,
}

/// Run the configured experiment over all its seeds. Trajectory and density
/// tables are recorded for the first seed only; the per-seed metrics cover
/// the rest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    let mut tables = Vec::new();
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let artifacts = if si == 0 { Some(&mut tables) } else { None };
        let report = match cfg.experiment {
            Experiment::SingleBayes => single_bayes::run(cfg, seed, artifacts)?,
            Experiment::DoubleWell => double_well::run(cfg, seed, artifacts)?,
            Experiment::Langevin => langevin::run(cfg, seed, artifacts)?,
            Experiment::Lorenz63 => lorenz::run(cfg, seed, artifacts)?,
        };
        reports.push(report);
    }
    Ok(ExperimentOutput {
        summary: ExperimentSummary {
            schema_version: CONFIG_VERSION,
            config: cfg.clone(),
            reports,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        tables,
    })
}

/// Median of a slice; non-finite entries sort last, so a majority of
/// diverged runs yields a non-finite median.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Less));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
