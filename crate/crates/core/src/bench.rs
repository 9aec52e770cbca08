//! Runs every optimizer on every shared initialization of one data set and
//! tabulates epochs to convergence and the log-likelihood gap to the best
//! run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Observations;
use crate::driver::{baseline_gd, em_vrso_v1, Budget, FitConfig, GdConfig, RunTrace, CONVERGENCE_TOL};
use crate::model::HmmParams;
use crate::vrso::{Algorithm, StepSizes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Stochastic EM with `m_factor · T` iterations per M step.
    Vrso { algorithm: Algorithm, partial_e: bool, m_factor: usize },
    Gd,
}

impl Method {
    /// Full E step with `M = T`, partial E with `M = T`, partial E with
    /// `M = 10T`, for each of SVRG and SAGA, then gradient descent.
    pub fn standard() -> Vec<Method> {
        let mut v = Vec::new();
        for algorithm in [Algorithm::Svrg, Algorithm::Saga] {
            for (partial_e, m_factor) in [(false, 1), (true, 1), (true, 10)] {
                v.push(Method::Vrso { algorithm, partial_e, m_factor });
            }
        }
        v.push(Method::Gd);
        v
    }

    pub fn label(&self) -> String {
        match *self {
            Method::Gd => "gd".into(),
            Method::Vrso { algorithm, partial_e, m_factor } => {
                let a = match algorithm {
                    Algorithm::Svrg => "svrg",
                    Algorithm::Saga => "saga",
                };
                let v = match (partial_e, m_factor) {
                    (false, 1) => "fe".to_string(),
                    (true, 1) => "pe1".to_string(),
                    (true, 10) => "pe2".to_string(),
                    (p, m) => format!("{}-m{m}", if p { "pe" } else { "fe" }),
                };
                format!("{a}-{v}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub experiment: String,
    pub data_seed: u64,
    /// Outer iterations for the stochastic methods.
    pub outer: usize,
    /// Gradient steps for the baseline.
    pub gd_iterations: usize,
    pub budget: Budget,
    /// Seed offset for the stochastic index streams.
    pub run_seed: u64,
}

/// One starting point shared by every method.
#[derive(Debug, Clone)]
pub struct Init {
    pub seed: u64,
    pub params: HmmParams,
    pub steps: StepSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub experiment: String,
    pub algorithm: String,
    pub partial_e: Option<bool>,
    pub iterations: Option<usize>,
    pub seed: u64,
    pub data_seed: u64,
    pub epochs_to_converge: Option<f64>,
    pub final_loglik: Option<f64>,
    pub loglik_gap_over_t: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub trace: Option<RunTrace>,
}

/// Runs all `(method, init)` cells in parallel. Failed cells keep their
/// error message and carry no gap.
pub fn benchmark_matrix(obs: &Observations, methods: &[Method], inits: &[Init], cfg: &BenchConfig) -> Vec<BenchRow> {
    let cells: Vec<(usize, usize)> = (0..inits.len()).flat_map(|i| (0..methods.len()).map(move |m| (i, m))).collect();
    let mut rows: Vec<BenchRow> = cells
        .par_iter()
        .map(|&(i, m)| run_cell(obs, methods[m], &inits[i], cfg, (i * methods.len() + m) as u64))
        .collect();
    let best = rows.iter().filter_map(|r| r.final_loglik).fold(f64::NEG_INFINITY, f64::max);
    for r in &mut rows {
        r.loglik_gap_over_t = r.final_loglik.map(|ll| (best - ll) / obs.len as f64);
    }
    rows
}

fn run_cell(obs: &Observations, method: Method, init: &Init, cfg: &BenchConfig, cell: u64) -> BenchRow {
    let t = obs.len;
    let (partial, iters, result) = match method {
        Method::Gd => {
            let mut g = GdConfig::new(cfg.gd_iterations);
            g.lipschitz = init.steps.lipschitz_theta;
            g.budget = cfg.budget;
            (None, None, baseline_gd(init.params.clone(), obs, &g))
        }
        Method::Vrso { algorithm, partial_e, m_factor } => {
            let mut f = FitConfig::new(algorithm, partial_e, m_factor * t, cfg.outer, cfg.run_seed.wrapping_add(cell));
            f.budget = cfg.budget;
            (Some(partial_e), Some(m_factor * t), em_vrso_v1(init.params.clone(), obs, init.steps, &f))
        }
    };
    let (trace, ll, error) = match result {
        Ok(fit) => (Some(fit.trace), Some(fit.loglik), None),
        Err(e) => (Some(e.trace), None, Some(e.error.to_string())),
    };
    BenchRow {
        experiment: cfg.experiment.clone(),
        algorithm: method.label(),
        partial_e: partial,
        iterations: iters,
        seed: init.seed,
        data_seed: cfg.data_seed,
        epochs_to_converge: trace.as_ref().and_then(|tr| tr.epochs_to_converge(CONVERGENCE_TOL)),
        final_loglik: ll,
        loglik_gap_over_t: None,
        error,
        trace,
    }
}
