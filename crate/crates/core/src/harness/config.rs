//! Experiment configuration: a versioned JSON schema with strict key
//! checking, plus the built-in default setups for each experiment.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SingleBayes,
    DoubleWell,
    Langevin,
    Lorenz63,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::SingleBayes => "single_bayes",
            Experiment::DoubleWell => "double_well",
            Experiment::Langevin => "langevin",
            Experiment::Lorenz63 => "lorenz63",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterName {
    Egmf,
    Rhf,
    EnkfPo,
    Esrf,
    KalmanBucy,
}

impl fmt::Display for FilterName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FilterName::Egmf => "egmf",
            FilterName::Rhf => "rhf",
            FilterName::EnkfPo => "enkf_po",
            FilterName::Esrf => "esrf",
            FilterName::KalmanBucy => "kalman_bucy",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FilterName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "egmf" => Ok(FilterName::Egmf),
            "rhf" => Ok(FilterName::Rhf),
            "enkf_po" => Ok(FilterName::EnkfPo),
            "esrf" => Ok(FilterName::Esrf),
            "kalman_bucy" => Ok(FilterName::KalmanBucy),
            other => Err(Error::Config(format!("unknown filter name `{other}`"))),
        }
    }
}

/// One filter entry with its optional tuning parameters; unset fields fall
/// back to the experiment defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub name: FilterName,
    /// Pseudo-time step of the transport loop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ds: Option<f64>,
    /// Sup-norm bound on the exchange field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_cut: Option<f64>,
    /// Exchange-term variant: "erf" (default) or "t3".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// Kernel bandwidth factor for the kernel-density mixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Multiplicative forecast inflation applied right before the analysis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflation: Option<f64>,
}

impl FilterSpec {
    pub fn bare(name: FilterName) -> Self {
        FilterSpec {
            name,
            ds: None,
            u_cut: None,
            variant: None,
            c: None,
            inflation: None,
        }
    }
}

/// Complete description of one experiment run; together with a seed it
/// determines every number the harness produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version; this build accepts only [`CONFIG_VERSION`].
    pub version: u32,
    pub experiment: Experiment,
    /// Ensemble size.
    pub m: usize,
    /// Observation noise variance. For the velocity-increment experiment
    /// this is the increment intensity `c`; the effective observation
    /// variance is `c/dt`.
    pub r: f64,
    /// Model time step.
    pub dt: f64,
    /// Model steps between observations.
    pub obs_interval: usize,
    /// Assimilation cycles (model steps for the velocity-increment
    /// experiment, which assimilates every step). The single Bayes step
    /// ignores it.
    pub horizon: usize,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub filters: Vec<FilterSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {})",
                self.version, CONFIG_VERSION
            )));
        }
        if self.m < 2 {
            return Err(Error::Config("ensemble size must be at least 2".into()));
        }
        if !(self.r > 0.0) {
            return Err(Error::Config("observation noise must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("time step must be positive".into()));
        }
        if self.obs_interval == 0 {
            return Err(Error::Config("obs_interval must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.filters.is_empty() {
            return Err(Error::Config("at least one filter is required".into()));
        }
        for f in &self.filters {
            if let Some(ds) = f.ds {
                if !(ds > 0.0 && ds <= 1.0) {
                    return Err(Error::Config(format!("filter {}: bad ds {ds}", f.name)));
                }
                let n = 1.0 / ds;
                if (n - n.round()).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "filter {}: 1/ds must be an integer, got {ds}",
                        f.name
                    )));
                }
            }
            if let Some(u) = f.u_cut {
                if !(u > 0.0) {
                    return Err(Error::Config(format!("filter {}: bad u_cut {u}", f.name)));
                }
            }
            if let Some(c) = f.c {
                if !(c > 0.0) {
                    return Err(Error::Config(format!("filter {}: bad c {c}", f.name)));
                }
            }
            if let Some(rho) = f.inflation {
                if !(rho > 0.0) {
                    return Err(Error::Config(format!(
                        "filter {}: bad inflation {rho}",
                        f.name
                    )));
                }
            }
            if let Some(v) = &f.variant {
                if v != "erf" && v != "t3" {
                    return Err(Error::Config(format!(
                        "filter {}: variant must be erf or t3, got `{v}`",
                        f.name
                    )));
                }
            }
            let applicable = match self.experiment {
                Experiment::Langevin => matches!(
                    f.name,
                    FilterName::Egmf | FilterName::KalmanBucy | FilterName::Rhf
                ),
                _ => f.name != FilterName::KalmanBucy,
            };
            if !applicable {
                return Err(Error::Config(format!(
                    "filter {} does not apply to the {} experiment",
                    f.name, self.experiment
                )));
            }
        }
        Ok(())
    }

    /// Restrict `filters` to the given names, preserving config order.
    pub fn retain_filters(&mut self, names: &[FilterName]) -> Result<()> {
        self.filters.retain(|f| names.contains(&f.name));
        if self.filters.is_empty() {
            return Err(Error::Config(
                "filter selection removed every configured filter".into(),
            ));
        }
        Ok(())
    }

    /// Stretch the horizon from the desk-scale default to the scale the
    /// published numbers use.
    pub fn apply_full(&mut self) {
        self.horizon = match self.experiment {
            Experiment::SingleBayes => self.horizon,
            Experiment::DoubleWell => 10_000,
            Experiment::Langevin => 2_000_000,
            Experiment::Lorenz63 => 101_000,
        };
    }

    pub fn default_single_bayes() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            experiment: Experiment::SingleBayes,
            m: 2000,
            r: 16.0,
            dt: 1.0,
            obs_interval: 1,
            horizon: 1,
            seeds: (0..10).collect(),
            output_dir: None,
            filters: vec![
                FilterSpec {
                    ds: Some(0.05),
                    u_cut: Some(25.0),
                    ..FilterSpec::bare(FilterName::Egmf)
                },
                FilterSpec::bare(FilterName::Rhf),
                FilterSpec::bare(FilterName::EnkfPo),
            ],
        }
    }

    pub fn default_double_well() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            experiment: Experiment::DoubleWell,
            m: 50,
            r: 36.0,
            dt: 0.1,
            obs_interval: 100,
            horizon: 1000,
            seeds: (0..5).collect(),
            output_dir: None,
            filters: vec![
                FilterSpec {
                    ds: Some(0.05),
                    u_cut: Some(100.0),
                    ..FilterSpec::bare(FilterName::Egmf)
                },
                FilterSpec::bare(FilterName::Rhf),
                FilterSpec::bare(FilterName::EnkfPo),
                FilterSpec {
                    ds: Some(0.05),
                    ..FilterSpec::bare(FilterName::Esrf)
                },
            ],
        }
    }

    pub fn default_langevin() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            experiment: Experiment::Langevin,
            m: 50,
            r: 0.2,
            dt: 0.01,
            obs_interval: 1,
            horizon: 200_000,
            seeds: vec![0, 1, 2],
            output_dir: None,
            filters: vec![
                FilterSpec {
                    ds: Some(1.0),
                    u_cut: Some(0.25),
                    ..FilterSpec::bare(FilterName::Egmf)
                },
                FilterSpec::bare(FilterName::KalmanBucy),
                FilterSpec::bare(FilterName::Rhf),
            ],
        }
    }

    pub fn default_lorenz() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            experiment: Experiment::Lorenz63,
            m: 25,
            r: 8.0,
            dt: 0.01,
            obs_interval: 20,
            horizon: 10_000,
            seeds: vec![0, 1, 2],
            output_dir: None,
            filters: vec![
                FilterSpec {
                    ds: Some(0.25),
                    u_cut: Some(0.5),
                    c: Some(0.6),
                    inflation: Some(1.1),
                    ..FilterSpec::bare(FilterName::Egmf)
                },
                FilterSpec {
                    ds: Some(0.25),
                    inflation: Some(1.0),
                    ..FilterSpec::bare(FilterName::Esrf)
                },
                FilterSpec {
                    inflation: Some(1.0),
                    ..FilterSpec::bare(FilterName::EnkfPo)
                },
                FilterSpec {
                    inflation: Some(1.0),
                    ..FilterSpec::bare(FilterName::Rhf)
                },
            ],
        }
    }

    pub fn default_for(experiment: Experiment) -> Self {
        match experiment {
            Experiment::SingleBayes => Self::default_single_bayes(),
            Experiment::DoubleWell => Self::default_double_well(),
            Experiment::Langevin => Self::default_langevin(),
            Experiment::Lorenz63 => Self::default_lorenz(),
        }
    }
}
