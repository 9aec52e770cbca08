//! Flat `key = value` run configuration shared by `simulate` and
//! `benchmark`.
//!
//! ```toml
//! model = "sim"                 # "sim" or "dive"
//! experiment = "sim-1e3-n3-d3"  # optional; fills len, n_states and dim
//! len = 1000
//! n_states = 3
//! dim = 3
//! seed = 0
//! gamma = [0.9, 0.1, 0.2, 0.8]  # optional row-major transition matrix
//!
//! # benchmark only
//! data_sets = 5
//! inits = 5
//! outer = 200
//! gd_iterations = 100000
//! max_epochs = 1000.0
//! time_budget = 3600.0          # seconds per run
//! ```

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use hmm_vrso::driver::Budget;
use hmm_vrso::sim::{DiveConfig, InitScheme, SimConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Sim,
    Dive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelKind,
    pub experiment: Option<String>,
    pub len: Option<usize>,
    pub n_states: Option<usize>,
    pub dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub gamma: Option<Vec<f64>>,

    #[serde(default = "default_five")]
    pub data_sets: usize,
    #[serde(default = "default_five")]
    pub inits: usize,
    #[serde(default = "default_outer")]
    pub outer: usize,
    #[serde(default = "default_gd_iterations")]
    pub gd_iterations: usize,
    pub max_epochs: Option<f64>,
    pub time_budget: Option<f64>,
}

fn default_five() -> usize {
    5
}

fn default_outer() -> usize {
    200
}

fn default_gd_iterations() -> usize {
    100_000
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::bad_input(path, e.message()))
    }

    pub fn label(&self) -> String {
        if let Some(e) = &self.experiment {
            return e.clone();
        }
        match self.model {
            ModelKind::Sim => format!("sim-{}-n{}-d{}", self.len.unwrap_or(0), self.n_states.unwrap_or(0), self.dim.unwrap_or(0)),
            ModelKind::Dive => format!("dive-{}", self.len.unwrap_or(0)),
        }
    }

    /// Simulation settings for data seed `seed`. Explicit keys override the
    /// named experiment.
    pub fn sim(&self, seed: u64) -> Result<SimConfig> {
        let mut cfg = match &self.experiment {
            Some(name) => SimConfig::preset(name, seed)?,
            None => {
                let need = |v: Option<usize>, key: &str| v.ok_or_else(|| CliError::invalid(format!("config needs `{key}` or `experiment`")));
                SimConfig::new(need(self.len, "len")?, need(self.n_states, "n_states")?, need(self.dim, "dim")?, seed)
            }
        };
        if let Some(v) = self.len {
            cfg.len = v;
        }
        if let Some(v) = self.n_states {
            cfg.n_states = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        cfg.gamma = self.gamma.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dive(&self, seed: u64) -> Result<DiveConfig> {
        if self.experiment.is_some() || self.n_states.is_some() || self.dim.is_some() || self.gamma.is_some() {
            return Err(CliError::invalid("dive configs take only `len` and `seed`"));
        }
        let len = self.len.ok_or_else(|| CliError::invalid("config needs `len`"))?;
        Ok(DiveConfig::new(len, seed))
    }

    pub fn init_scheme(&self) -> Result<InitScheme> {
        Ok(match self.model {
            ModelKind::Sim => InitScheme::Sim { n_states: self.sim(self.seed)?.n_states },
            ModelKind::Dive => InitScheme::Dive,
        })
    }

    pub fn budget(&self) -> Result<Budget> {
        budget(self.max_epochs, self.time_budget)
    }
}

pub fn budget(max_epochs: Option<f64>, seconds: Option<f64>) -> Result<Budget> {
    if max_epochs.is_some_and(|e| !(e > 0.0)) {
        return Err(CliError::invalid("max_epochs must be positive"));
    }
    let max_time = match seconds {
        None => None,
        Some(s) => Some(Duration::try_from_secs_f64(s).map_err(|_| CliError::invalid(format!("bad time budget {s}")))?),
    };
    Ok(Budget { max_epochs, max_time })
}
