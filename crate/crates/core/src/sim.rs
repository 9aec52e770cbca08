//! Synthetic data and random parameter initialization.
//!
//! Gaussian HMM data follow the simulation protocol used for benchmarking:
//! standard normal state means, variances `exp(-2)`, a start distribution
//! drawn uniformly from the simplex and a sticky transition matrix expecting
//! about 100 switches. Dive data are drawn from the hierarchical dive model
//! with defaults taken from a fitted killer whale model.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Observations;
use crate::error::{HmmError, Result};
use crate::model::{DiagGaussian, EmissionParams, HmmParams, NormalBernoulli, TransitionLogits, TransitionModel};
use crate::vrso::StepSizes;

/// Initial Lipschitz estimate for both parameter blocks.
pub const INITIAL_LIPSCHITZ: f64 = 100.0 / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub len: usize,
    pub n_states: usize,
    pub dim: usize,
    pub seed: u64,
    /// Row-major transition matrix replacing the default sticky one.
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
}

impl SimConfig {
    pub fn new(len: usize, n_states: usize, dim: usize, seed: u64) -> Self {
        SimConfig { len, n_states, dim, seed, gamma: None }
    }

    /// Named grid cell such as `sim-1e3-n3-d3`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let bad = || HmmError::config(format!("unknown experiment `{name}`; expected sim-1e<k>-n<N>-d<d>"));
        let parts: Vec<&str> = name.split('-').collect();
        let [tag, t, n, d] = parts[..] else { return Err(bad()) };
        if tag != "sim" {
            return Err(bad());
        }
        let exp: u32 = t.strip_prefix("1e").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let n: usize = n.strip_prefix('n').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let d: usize = d.strip_prefix('d').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Ok(SimConfig::new(10usize.checked_pow(exp).ok_or_else(bad)?, n, d, seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.n_states == 0 || self.dim == 0 {
            return Err(HmmError::config("length, state count and dimension must be positive"));
        }
        if let Some(g) = &self.gamma {
            check_stochastic(g, self.n_states)?;
        }
        Ok(())
    }

    /// Diagonal and off-diagonal entries of the default transition matrix.
    pub fn sticky_entries(&self) -> (f64, f64) {
        sticky_entries(self.len, self.n_states)
    }

    pub fn transition_matrix(&self) -> Vec<f64> {
        if let Some(g) = &self.gamma {
            return g.clone();
        }
        let n = self.n_states;
        let (stay, off) = self.sticky_entries();
        (0..n * n).map(|ij| if ij / n == ij % n { stay } else { off }).collect()
    }
}

/// `(0.9, 0.05)`, `(0.9, 0.02)`, `(0.999, 5e-4)` and `(0.999, 2e-4)` for the
/// four benchmark cells; otherwise a matrix expecting `min(100, T/10)`
/// switches.
pub fn sticky_entries(len: usize, n: usize) -> (f64, f64) {
    match (len, n) {
        (_, 1) => (1.0, 0.0),
        (1_000, 3) => (0.9, 0.05),
        (1_000, 6) => (0.9, 0.02),
        (100_000, 3) => (0.999, 5e-4),
        (100_000, 6) => (0.999, 2e-4),
        _ => {
            let leave = (100.0 / len as f64).min(0.1);
            (1.0 - leave, leave / (n - 1) as f64)
        }
    }
}

fn check_stochastic(g: &[f64], n: usize) -> Result<()> {
    if g.len() != n * n {
        return Err(HmmError::Dimension { what: "transition matrix", expected: n * n, got: g.len() });
    }
    for i in 0..n {
        let row = &g[i * n..(i + 1) * n];
        if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(HmmError::config(format!("transition row {i} is not a probability vector")));
        }
    }
    Ok(())
}

/// A simulated sequence with its hidden states and generating parameters.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub obs: Observations,
    pub states: Vec<usize>,
    pub truth: HmmParams,
}

/// Uniform draw from the probability simplex.
fn flat_dirichlet(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn row_samplers(g: &[f64], n: usize) -> Result<Vec<WeightedIndex<f64>>> {
    (0..n)
        .map(|i| WeightedIndex::new(&g[i * n..(i + 1) * n]).map_err(|e| HmmError::config(format!("row {i}: {e}"))))
        .collect()
}

/// Gaussian HMM data.
pub fn simulate_hmm(cfg: &SimConfig) -> Result<Simulated> {
    cfg.validate()?;
    let (n, d, len) = (cfg.n_states, cfg.dim, cfg.len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let log_vars = vec![-2.0; n * d];
    let delta = flat_dirichlet(n, &mut rng);
    let gamma = cfg.transition_matrix();

    let start = WeightedIndex::new(&delta).map_err(|e| HmmError::config(e.to_string()))?;
    let rows = row_samplers(&gamma, n)?;
    let sd = (-1.0f64).exp();
    let mut states = Vec::with_capacity(len);
    let mut values = Vec::with_capacity(len * d);
    let mut x = start.sample(&mut rng);
    for t in 0..len {
        if t > 0 {
            x = rows[x].sample(&mut rng);
        }
        states.push(x);
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            values.push(means[x * d + k] + sd * z);
        }
    }
    let emission = EmissionParams::Gaussian(DiagGaussian::new(n, d, means, log_vars)?);
    let transitions = TransitionModel::Homogeneous(TransitionLogits::from_probabilities(&gamma, &delta)?);
    Ok(Simulated { obs: Observations::new(d, values)?, states, truth: HmmParams::new(emission, transitions)? })
}

/// Generating parameters of the dive model: three dive types, each with
/// descent, bottom and ascent phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiveConfig {
    pub len: usize,
    pub seed: u64,
    /// Per type and phase, `types × 3`.
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Dive-end probability in the ascent phase of each type.
    pub end_prob: Vec<f64>,
    /// Row-major `types × types`; rows are renormalized before use.
    pub coarse: Vec<f64>,
    pub coarse_start: Vec<f64>,
    /// One row-major upper-triangular `3 × 3` matrix per type.
    pub fine: Vec<Vec<f64>>,
}

pub const PHASES: usize = 3;
pub const DESCENT: usize = 0;
pub const BOTTOM: usize = 1;
pub const ASCENT: usize = 2;

impl DiveConfig {
    pub fn new(len: usize, seed: u64) -> Self {
        DiveConfig {
            len,
            seed,
            means: vec![0.70, 0.02, -0.67, 0.33, 0.00, -0.44, 2.71, 0.01, -2.50],
            sds: vec![0.45, 0.23, 0.40, 0.15, 0.15, 0.21, 1.85, 0.64, 1.58],
            end_prob: vec![0.12, 0.47, 0.04],
            coarse: vec![0.223, 0.758, 0.017, 0.123, 0.853, 0.027, 0.074, 0.857, 0.068],
            coarse_start: vec![0.258, 0.002, 0.740],
            fine: vec![
                vec![0.871, 0.123, 0.006, 0.0, 0.962, 0.038, 0.0, 0.0, 1.0],
                vec![0.668, 0.304, 0.028, 0.0, 0.788, 0.212, 0.0, 0.0, 1.0],
                vec![0.958, 0.040, 0.002, 0.0, 0.982, 0.018, 0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn types(&self) -> usize {
        self.coarse_start.len()
    }

    /// Coarse matrix with each row rescaled to sum to one.
    pub fn coarse_normalized(&self) -> Vec<f64> {
        let m = self.types();
        let mut g = self.coarse.clone();
        for i in 0..m {
            let s: f64 = g[i * m..(i + 1) * m].iter().sum();
            g[i * m..(i + 1) * m].iter_mut().for_each(|v| *v /= s);
        }
        g
    }

    fn validate(&self) -> Result<()> {
        let m = self.types();
        if self.len == 0 || m == 0 {
            return Err(HmmError::config("dive data need a positive length and at least one type"));
        }
        for (what, got, expected) in [
            ("dive means", self.means.len(), m * PHASES),
            ("dive sds", self.sds.len(), m * PHASES),
            ("dive end probabilities", self.end_prob.len(), m),
            ("coarse matrix", self.coarse.len(), m * m),
            ("fine matrices", self.fine.len(), m),
        ] {
            if got != expected {
                return Err(HmmError::Dimension { what, expected, got });
            }
        }
        if self.sds.iter().any(|&s| !(s > 0.0)) {
            return Err(HmmError::config("dive standard deviations must be positive"));
        }
        if self.end_prob.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(HmmError::config("dive end probabilities must lie in (0, 1)"));
        }
        for f in &self.fine {
            check_stochastic(f, PHASES)?;
            for i in 0..PHASES {
                for j in 0..i {
                    if f[i * PHASES + j] != 0.0 {
                        return Err(HmmError::config("fine matrices must be upper-triangular"));
                    }
                }
            }
        }
        check_stochastic(&self.coarse_normalized(), m)?;
        Ok(())
    }

    /// The generating parameters as a structured model.
    pub fn params(&self) -> Result<HmmParams> {
        self.validate()?;
        let m = self.types();
        let n = m * PHASES;
        let log_vars = self.sds.iter().map(|s| 2.0 * s.ln()).collect();
        let mut logits = vec![0.0; n];
        let mut fixed = vec![Some(0.0); n];
        for a in 0..m {
            let p = self.end_prob[a];
            logits[a * PHASES + ASCENT] = (p / (1.0 - p)).ln();
            fixed[a * PHASES + ASCENT] = None;
        }
        let emission = EmissionParams::NormalBernoulli(NormalBernoulli::new(self.means.clone(), log_vars, logits, fixed)?);
        let coarse = TransitionLogits::from_probabilities(&self.coarse_normalized(), &self.coarse_start)?;
        let mut start = vec![0.0; PHASES];
        start[DESCENT] = 1.0;
        let fine = self
            .fine
            .iter()
            .map(|f| {
                let mut l = TransitionLogits::from_probabilities(f, &start)?;
                l.mask_lower_triangle();
                Ok(l)
            })
            .collect::<Result<_>>()?;
        HmmParams::new(emission, TransitionModel::DiveStructured { coarse, fine })
    }
}

/// Simulated dive data with hidden `(type, phase)` states.
#[derive(Debug, Clone)]
pub struct SimulatedDives {
    pub obs: Observations,
    pub dive_type: Vec<usize>,
    pub phase: Vec<usize>,
    pub truth: HmmParams,
}

impl SimulatedDives {
    pub fn states(&self) -> Vec<usize> {
        self.dive_type.iter().zip(&self.phase).map(|(a, p)| a * PHASES + p).collect()
    }
}

pub fn simulate_dives(cfg: &DiveConfig) -> Result<SimulatedDives> {
    let truth = cfg.params()?;
    let m = cfg.types();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = WeightedIndex::new(&cfg.coarse_start).map_err(|e| HmmError::config(e.to_string()))?;
    let coarse = row_samplers(&cfg.coarse_normalized(), m)?;
    let fine: Vec<Vec<WeightedIndex<f64>>> = cfg.fine.iter().map(|f| row_samplers(f, PHASES)).collect::<Result<_>>()?;

    let (mut depth, mut ends) = (Vec::with_capacity(cfg.len), Vec::with_capacity(cfg.len));
    let (mut types, mut phases) = (Vec::with_capacity(cfg.len), Vec::with_capacity(cfg.len));
    let mut a = start.sample(&mut rng);
    let mut p = DESCENT;
    for t in 0..cfg.len {
        if t > 0 {
            if ends[t - 1] {
                a = coarse[a].sample(&mut rng);
                p = DESCENT;
            } else {
                p = fine[a][p].sample(&mut rng);
            }
        }
        let s = a * PHASES + p;
        let d = Normal::new(cfg.means[s], cfg.sds[s]).map_err(|e| HmmError::config(e.to_string()))?;
        depth.push(d.sample(&mut rng));
        ends.push(p == ASCENT && rng.random::<f64>() < cfg.end_prob[a]);
        types.push(a);
        phases.push(p);
    }
    Ok(SimulatedDives { obs: Observations::dives(&depth, &ends)?, dive_type: types, phase: phases, truth })
}

/// How to draw starting parameters from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Diagonal Gaussian with `n_states` states.
    Sim { n_states: usize },
    /// Three-type, three-phase dive model.
    Dive,
}

/// Random starting parameters and the initial step sizes.
pub fn init_params(obs: &Observations, scheme: InitScheme, seed: u64) -> Result<(HmmParams, StepSizes)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match scheme {
        InitScheme::Sim { n_states } => init_gaussian(obs, n_states, &mut rng)?,
        InitScheme::Dive => init_dive(obs, &mut rng)?,
    };
    Ok((params, StepSizes::new(INITIAL_LIPSCHITZ)))
}

/// Column means and unbiased variances.
fn moments(obs: &Observations) -> (Vec<f64>, Vec<f64>) {
    let (mean, var) = obs.column_moments();
    let n = obs.len as f64;
    let scale = if obs.len > 1 { n / (n - 1.0) } else { 1.0 };
    (mean, var.into_iter().map(|v| v * scale).collect())
}

fn gauss(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    mean + sd * rng.sample::<f64, _>(StandardNormal)
}

fn init_gaussian(obs: &Observations, n: usize, rng: &mut impl Rng) -> Result<HmmParams> {
    if n == 0 {
        return Err(HmmError::config("state count must be positive"));
    }
    let d = obs.dim;
    let (mean, var) = moments(obs);
    if let Some(k) = (0..d).find(|&k| obs.is_constant_column(k) || !(var[k] > 0.0)) {
        return Err(HmmError::config(format!("observation column {k} has zero variance")));
    }
    let mut means = Vec::with_capacity(n * d);
    for _ in 0..n {
        for k in 0..d {
            means.push(gauss(rng, mean[k], var[k].sqrt()));
        }
    }
    let log_vars = (0..n).flat_map(|_| var.iter().map(|v| v.ln())).collect();
    let mut t = TransitionLogits::uniform(n);
    for k in 1..n {
        t.eta_delta[k] = gauss(rng, 0.0, 1.0);
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                t.eta_gamma[i * n + j] = gauss(rng, -2.0, 2.0);
            }
        }
    }
    HmmParams::new(EmissionParams::Gaussian(DiagGaussian::new(n, d, means, log_vars)?), TransitionModel::Homogeneous(t))
}

fn init_dive(obs: &Observations, rng: &mut impl Rng) -> Result<HmmParams> {
    if obs.dim != 2 {
        return Err(HmmError::Dimension { what: "dive observation columns", expected: 2, got: obs.dim });
    }
    let (mean, var) = moments(obs);
    if obs.is_constant_column(0) || !(var[0] > 0.0) {
        return Err(HmmError::config("depth changes have zero variance"));
    }
    let s = var[0].sqrt();
    let e_bar = mean[1];
    if !(e_bar > 0.0 && e_bar < 1.0) {
        return Err(HmmError::config("dive-end indicators must contain both values"));
    }
    let types = 3;
    let n = types * PHASES;
    let mut means = Vec::with_capacity(n);
    let mut log_vars = Vec::with_capacity(n);
    let mut logits = vec![0.0; n];
    let mut fixed = vec![Some(0.0); n];
    for a in 0..types {
        for p in 0..PHASES {
            means.push(gauss(rng, mean[0], s));
            log_vars.push(2.0 * gauss(rng, s.ln(), 1.0));
            if p == ASCENT {
                logits[a * PHASES + p] = gauss(rng, (e_bar / (1.0 - e_bar)).ln(), 1.0);
                fixed[a * PHASES + p] = None;
            }
        }
    }
    let emission = EmissionParams::NormalBernoulli(NormalBernoulli::new(means, log_vars, logits, fixed)?);
    let mut tm = TransitionModel::dive(types, PHASES);
    if let TransitionModel::DiveStructured { coarse, fine } = &mut tm {
        for k in 1..types {
            coarse.eta_delta[k] = gauss(rng, 0.0, 1.0);
        }
        for i in 0..types {
            for j in 0..types {
                if i != j {
                    coarse.eta_gamma[i * types + j] = gauss(rng, -3.0, 1.0);
                }
            }
        }
        for f in fine.iter_mut() {
            for i in 0..PHASES {
                for j in i + 1..PHASES {
                    f.eta_gamma[i * PHASES + j] = gauss(rng, -1.0, 1.0);
                }
            }
        }
    }
    HmmParams::new(emission, tm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{stationary_distribution, EmissionModel};

    #[test]
    fn grid_matrices() {
        assert_eq!(sticky_entries(1_000, 3), (0.9, 0.05));
        assert_eq!(sticky_entries(1_000, 6), (0.9, 0.02));
        assert_eq!(sticky_entries(100_000, 3), (0.999, 5e-4));
        assert_eq!(sticky_entries(100_000, 6), (0.999, 2e-4));
        let (s, o) = sticky_entries(10, 2);
        assert!((s - 0.9).abs() < 1e-15 && (o - 0.1).abs() < 1e-15);
    }

    #[test]
    fn preset_names() {
        let c = SimConfig::preset("sim-1e3-n3-d3", 4).unwrap();
        assert_eq!((c.len, c.n_states, c.dim, c.seed), (1000, 3, 3, 4));
        assert!(SimConfig::preset("sim-1e3-n3", 4).is_err());
        assert!(SimConfig::preset("foo-1e3-n3-d3", 4).is_err());
    }

    #[test]
    fn identity_chain_never_moves() {
        let mut c = SimConfig::new(200, 3, 1, 9);
        c.gamma = Some(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let s = simulate_hmm(&c).unwrap();
        assert!(s.states.iter().all(|&x| x == s.states[0]));
    }

    #[test]
    fn simulation_is_deterministic() {
        let c = SimConfig::new(50, 2, 2, 3);
        assert_eq!(simulate_hmm(&c).unwrap().obs, simulate_hmm(&c).unwrap().obs);
    }

    #[test]
    fn constant_data_cannot_initialize() {
        let obs = Observations::new(1, vec![2.0; 10]).unwrap();
        assert!(matches!(init_params(&obs, InitScheme::Sim { n_states: 2 }, 0), Err(HmmError::Config(_))));
    }

    #[test]
    fn initial_steps_are_one_percent() {
        let s = simulate_hmm(&SimConfig::new(100, 3, 2, 1)).unwrap();
        let (p, st) = init_params(&s.obs, InitScheme::Sim { n_states: 3 }, 5).unwrap();
        assert!((st.lambda_theta() - 0.01).abs() < 1e-15 && (st.lambda_eta() - 0.01).abs() < 1e-15);
        let (q, _) = init_params(&s.obs, InitScheme::Sim { n_states: 3 }, 5).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn dives_start_in_descent_and_never_go_back() {
        let s = simulate_dives(&DiveConfig::new(5_000, 2)).unwrap();
        assert_eq!(s.phase[0], DESCENT);
        for t in 1..s.phase.len() {
            if s.obs.boundary[t] {
                assert_eq!(s.phase[t], DESCENT);
            } else {
                assert_eq!(s.dive_type[t], s.dive_type[t - 1]);
                assert!(s.phase[t] >= s.phase[t - 1]);
            }
            if s.obs.row(t)[1] == 1.0 {
                assert_eq!(s.phase[t], ASCENT);
            }
        }
    }

    #[test]
    fn dive_truth_has_pinned_end_probabilities() {
        let p = DiveConfig::new(10, 0).params().unwrap();
        assert_eq!(p.n_states(), 9);
        // 9 means, 9 log-variances, 3 ascent logits
        assert_eq!(p.emission.free_dim(), 21);
    }

    #[test]
    fn fitted_coarse_chain_stationary_distribution() {
        let c = DiveConfig::new(10, 0);
        let pi = stationary_distribution(&c.coarse_normalized(), 3).unwrap();
        // reported as about 13.6%, 84.0% and 2.4% of dives
        for (a, b) in pi.iter().zip([0.136, 0.840, 0.024]) {
            assert!((a - b).abs() < 5e-3, "{pi:?}");
        }
    }

    #[test]
    fn dive_init_respects_structure() {
        let s = simulate_dives(&DiveConfig::new(2_000, 1)).unwrap();
        let (p, _) = init_params(&s.obs, InitScheme::Dive, 3).unwrap();
        let tr = p.realize().unwrap();
        for (k, &d) in tr.delta.iter().enumerate() {
            assert_eq!(d == 0.0, k % PHASES != DESCENT);
        }
        p.validate().unwrap();
    }
}
