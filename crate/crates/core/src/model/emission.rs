//! State-dependent observation densities.
//!
//! Each model exposes its free parameters as a flat vector, the per-state log
//! density of one observation row, and the value and gradient of the weighted
//! negative log density `-Σ_i γ_i log f_i(y)` that forms the emission part of
//! the surrogate. Zero weights are skipped, so an impossible observation under
//! a state with zero posterior weight contributes nothing.

use serde::{Deserialize, Serialize};

use crate::error::{HmmError, Result};

/// Lower bound on every log-variance.
pub const MIN_LOG_VARIANCE: f64 = -23.025850929940457; // ln(1e-10)

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub trait EmissionModel: Clone + Send + Sync + std::fmt::Debug {
    fn n_states(&self) -> usize;
    /// Number of columns in one observation row.
    fn obs_dim(&self) -> usize;
    fn free_dim(&self) -> usize;
    fn pack(&self, out: &mut Vec<f64>);
    fn unpack(&mut self, src: &[f64]) -> Result<()>;
    /// `out[i] = log f_i(y)`.
    fn log_density_row(&self, y: &[f64], out: &mut [f64]);
    /// Adds the gradient of `-γ_i log f_i(y)` for the free coordinates of
    /// state `i` into `out`.
    fn add_state_grad(&self, i: usize, y: &[f64], weight: f64, out: &mut [f64]);
    /// Keeps parameters inside their admissible region after a step.
    fn project(&mut self) {}
    /// Checks one observation row for values the model cannot represent.
    fn check_row(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.obs_dim() {
            return Err(HmmError::Dimension {
                what: "observation row",
                expected: self.obs_dim(),
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(HmmError::config("observation contains a non-finite value"));
        }
        Ok(())
    }

    /// `-Σ_i γ_i log f_i(y)` with `0·log 0 = 0`.
    fn weighted_nll(&self, y: &[f64], gamma: &[f64], t: usize) -> Result<f64> {
        let mut logf = vec![0.0; self.n_states()];
        self.log_density_row(y, &mut logf);
        let mut v = 0.0;
        for (&w, &lf) in gamma.iter().zip(&logf) {
            if w == 0.0 {
                continue;
            }
            if lf == f64::NEG_INFINITY {
                return Err(HmmError::MaskedWeight { t, what: "emission", weight: w });
            }
            v -= w * lf;
        }
        Ok(v)
    }

    /// Adds the gradient of [`EmissionModel::weighted_nll`] into `out`.
    fn weighted_nll_grad(&self, y: &[f64], gamma: &[f64], t: usize, out: &mut [f64]) -> Result<()> {
        let mut logf = vec![0.0; self.n_states()];
        self.log_density_row(y, &mut logf);
        for (i, &w) in gamma.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if logf[i] == f64::NEG_INFINITY {
                return Err(HmmError::MaskedWeight { t, what: "emission", weight: w });
            }
            self.add_state_grad(i, y, w, out);
        }
        Ok(())
    }
}

/// Independent Gaussians per dimension with log-variance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d`.
    pub means: Vec<f64>,
    /// Row-major `n × d`.
    pub log_vars: Vec<f64>,
    /// Holds the log-variances fixed, so only the means are free.
    #[serde(default)]
    pub fixed_variances: bool,
}

impl DiagGaussian {
    pub fn new(n: usize, d: usize, means: Vec<f64>, log_vars: Vec<f64>) -> Result<Self> {
        if means.len() != n * d {
            return Err(HmmError::Dimension { what: "means", expected: n * d, got: means.len() });
        }
        if log_vars.len() != n * d {
            return Err(HmmError::Dimension { what: "log-variances", expected: n * d, got: log_vars.len() });
        }
        Ok(DiagGaussian { n, d, means, log_vars, fixed_variances: false })
    }

    fn per_state(&self) -> usize {
        if self.fixed_variances {
            self.d
        } else {
            2 * self.d
        }
    }
}

impl EmissionModel for DiagGaussian {
    fn n_states(&self) -> usize {
        self.n
    }

    fn obs_dim(&self) -> usize {
        self.d
    }

    fn free_dim(&self) -> usize {
        self.n * self.per_state()
    }

    fn pack(&self, out: &mut Vec<f64>) {
        for i in 0..self.n {
            out.extend_from_slice(&self.means[i * self.d..(i + 1) * self.d]);
            if !self.fixed_variances {
                out.extend_from_slice(&self.log_vars[i * self.d..(i + 1) * self.d]);
            }
        }
    }

    fn unpack(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.free_dim() {
            return Err(HmmError::Dimension { what: "emission free coordinates", expected: self.free_dim(), got: src.len() });
        }
        let (d, k) = (self.d, self.per_state());
        for i in 0..self.n {
            let block = &src[i * k..(i + 1) * k];
            self.means[i * d..(i + 1) * d].copy_from_slice(&block[..d]);
            if !self.fixed_variances {
                self.log_vars[i * d..(i + 1) * d].copy_from_slice(&block[d..]);
            }
        }
        Ok(())
    }

    fn log_density_row(&self, y: &[f64], out: &mut [f64]) {
        let d = self.d;
        for (i, o) in out.iter_mut().enumerate() {
            let mu = &self.means[i * d..(i + 1) * d];
            let rho = &self.log_vars[i * d..(i + 1) * d];
            let mut s = 0.0;
            for k in 0..d {
                let z = y[k] - mu[k];
                s -= HALF_LN_2PI + 0.5 * rho[k] + 0.5 * z * z * (-rho[k]).exp();
            }
            *o = s;
        }
    }

    fn add_state_grad(&self, i: usize, y: &[f64], w: f64, out: &mut [f64]) {
        let (d, k) = (self.d, self.per_state());
        let base = i * k;
        for c in 0..d {
            let z = y[c] - self.means[i * d + c];
            let prec = (-self.log_vars[i * d + c]).exp();
            out[base + c] -= w * z * prec;
            if !self.fixed_variances {
                out[base + d + c] += w * 0.5 * (1.0 - z * z * prec);
            }
        }
    }

    fn project(&mut self) {
        for r in &mut self.log_vars {
            *r = r.max(MIN_LOG_VARIANCE);
        }
    }
}

/// Product of a Normal density on column 0 and a Bernoulli mass on column 1,
/// as used for depth change and dive-end indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalBernoulli {
    pub means: Vec<f64>,
    pub log_vars: Vec<f64>,
    /// Logit of the probability that column 1 equals 1.
    pub end_logits: Vec<f64>,
    /// `Some(p)` pins the Bernoulli probability at `p`; such states have no
    /// free logit.
    pub end_fixed: Vec<Option<f64>>,
}

impl NormalBernoulli {
    pub fn new(means: Vec<f64>, log_vars: Vec<f64>, end_logits: Vec<f64>, end_fixed: Vec<Option<f64>>) -> Result<Self> {
        let n = means.len();
        for (what, got) in [("log-variances", log_vars.len()), ("end logits", end_logits.len()), ("end mask", end_fixed.len())] {
            if got != n {
                return Err(HmmError::Dimension { what, expected: n, got });
            }
        }
        for p in end_fixed.iter().flatten() {
            if !(0.0..=1.0).contains(p) {
                return Err(HmmError::config(format!("pinned end probability {p} outside [0,1]")));
            }
        }
        Ok(NormalBernoulli { means, log_vars, end_logits, end_fixed })
    }

    fn offset(&self, i: usize) -> usize {
        (0..i).map(|k| 2 + usize::from(self.end_fixed[k].is_none())).sum()
    }

    /// `(ln p, ln(1 - p))` for state `i`.
    fn log_end(&self, i: usize) -> (f64, f64) {
        match self.end_fixed[i] {
            Some(p) => (p.ln(), (1.0 - p).ln()),
            None => {
                let l = self.end_logits[i];
                (-softplus(-l), -softplus(l))
            }
        }
    }

    pub fn end_probability(&self, i: usize) -> f64 {
        match self.end_fixed[i] {
            Some(p) => p,
            None => 1.0 / (1.0 + (-self.end_logits[i]).exp()),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl EmissionModel for NormalBernoulli {
    fn n_states(&self) -> usize {
        self.means.len()
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn free_dim(&self) -> usize {
        self.offset(self.n_states())
    }

    fn pack(&self, out: &mut Vec<f64>) {
        for i in 0..self.n_states() {
            out.push(self.means[i]);
            out.push(self.log_vars[i]);
            if self.end_fixed[i].is_none() {
                out.push(self.end_logits[i]);
            }
        }
    }

    fn unpack(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.free_dim() {
            return Err(HmmError::Dimension { what: "emission free coordinates", expected: self.free_dim(), got: src.len() });
        }
        let mut pos = 0;
        for i in 0..self.n_states() {
            self.means[i] = src[pos];
            self.log_vars[i] = src[pos + 1];
            pos += 2;
            if self.end_fixed[i].is_none() {
                self.end_logits[i] = src[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    fn log_density_row(&self, y: &[f64], out: &mut [f64]) {
        let end = y[1] == 1.0;
        for (i, o) in out.iter_mut().enumerate() {
            let z = y[0] - self.means[i];
            let normal = -HALF_LN_2PI - 0.5 * self.log_vars[i] - 0.5 * z * z * (-self.log_vars[i]).exp();
            let (lp, lq) = self.log_end(i);
            *o = normal + if end { lp } else { lq };
        }
    }

    fn add_state_grad(&self, i: usize, y: &[f64], w: f64, out: &mut [f64]) {
        let base = self.offset(i);
        let z = y[0] - self.means[i];
        let prec = (-self.log_vars[i]).exp();
        out[base] -= w * z * prec;
        out[base + 1] += w * 0.5 * (1.0 - z * z * prec);
        if self.end_fixed[i].is_none() {
            out[base + 2] -= w * (y[1] - self.end_probability(i));
        }
    }

    fn project(&mut self) {
        for r in &mut self.log_vars {
            *r = r.max(MIN_LOG_VARIANCE);
        }
    }

    fn check_row(&self, y: &[f64]) -> Result<()> {
        if y.len() != 2 {
            return Err(HmmError::Dimension { what: "observation row", expected: 2, got: y.len() });
        }
        if !y[0].is_finite() {
            return Err(HmmError::config("depth change is not finite"));
        }
        if y[1] != 0.0 && y[1] != 1.0 {
            return Err(HmmError::config(format!("dive-end indicator must be 0 or 1, got {}", y[1])));
        }
        Ok(())
    }
}

/// Finite-alphabet emissions. Symbols are stored as `0.0, 1.0, ...` in a
/// single observation column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    pub n: usize,
    pub symbols: usize,
    /// Row-major `n × symbols`; the first logit of every row is pinned at 0.
    pub logits: Vec<f64>,
}

impl Categorical {
    /// Builds logits that reproduce the given row-major probability table.
    pub fn from_probabilities(n: usize, symbols: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != n * symbols {
            return Err(HmmError::Dimension { what: "emission table", expected: n * symbols, got: probs.len() });
        }
        let mut logits = vec![0.0; n * symbols];
        for i in 0..n {
            let row = &probs[i * symbols..(i + 1) * symbols];
            if row.iter().any(|&p| p <= 0.0) {
                return Err(HmmError::config("categorical probabilities must be positive"));
            }
            for s in 1..symbols {
                logits[i * symbols + s] = (row[s] / row[0]).ln();
            }
        }
        Ok(Categorical { n, symbols, logits })
    }

    fn log_probs(&self, i: usize, out: &mut [f64]) {
        let row = &self.logits[i * self.symbols..(i + 1) * self.symbols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        for (o, &x) in out.iter_mut().zip(row) {
            *o = x - lz;
        }
    }
}

impl EmissionModel for Categorical {
    fn n_states(&self) -> usize {
        self.n
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn free_dim(&self) -> usize {
        self.n * (self.symbols - 1)
    }

    fn pack(&self, out: &mut Vec<f64>) {
        for i in 0..self.n {
            out.extend_from_slice(&self.logits[i * self.symbols + 1..(i + 1) * self.symbols]);
        }
    }

    fn unpack(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.free_dim() {
            return Err(HmmError::Dimension { what: "emission free coordinates", expected: self.free_dim(), got: src.len() });
        }
        let k = self.symbols - 1;
        for i in 0..self.n {
            self.logits[i * self.symbols + 1..(i + 1) * self.symbols].copy_from_slice(&src[i * k..(i + 1) * k]);
        }
        Ok(())
    }

    fn log_density_row(&self, y: &[f64], out: &mut [f64]) {
        let s = y[0] as usize;
        let mut lp = vec![0.0; self.symbols];
        for (i, o) in out.iter_mut().enumerate() {
            self.log_probs(i, &mut lp);
            *o = lp[s];
        }
    }

    fn add_state_grad(&self, i: usize, y: &[f64], w: f64, out: &mut [f64]) {
        let s = y[0] as usize;
        let mut lp = vec![0.0; self.symbols];
        self.log_probs(i, &mut lp);
        let base = i * (self.symbols - 1);
        for c in 1..self.symbols {
            let hit = if c == s { 1.0 } else { 0.0 };
            out[base + c - 1] -= w * (hit - lp[c].exp());
        }
    }

    fn check_row(&self, y: &[f64]) -> Result<()> {
        if y.len() != 1 {
            return Err(HmmError::Dimension { what: "observation row", expected: 1, got: y.len() });
        }
        let v = y[0];
        if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < self.symbols) {
            return Err(HmmError::config(format!("symbol {v} outside 0..{}", self.symbols)));
        }
        Ok(())
    }
}

/// The built-in emission models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmissionParams {
    Gaussian(DiagGaussian),
    NormalBernoulli(NormalBernoulli),
    Categorical(Categorical),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            EmissionParams::Gaussian($m) => $body,
            EmissionParams::NormalBernoulli($m) => $body,
            EmissionParams::Categorical($m) => $body,
        }
    };
}

impl EmissionModel for EmissionParams {
    fn n_states(&self) -> usize {
        dispatch!(self, m => m.n_states())
    }
    fn obs_dim(&self) -> usize {
        dispatch!(self, m => m.obs_dim())
    }
    fn free_dim(&self) -> usize {
        dispatch!(self, m => m.free_dim())
    }
    fn pack(&self, out: &mut Vec<f64>) {
        dispatch!(self, m => m.pack(out))
    }
    fn unpack(&mut self, src: &[f64]) -> Result<()> {
        dispatch!(self, m => m.unpack(src))
    }
    fn log_density_row(&self, y: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.log_density_row(y, out))
    }
    fn add_state_grad(&self, i: usize, y: &[f64], w: f64, out: &mut [f64]) {
        dispatch!(self, m => m.add_state_grad(i, y, w, out))
    }
    fn project(&mut self) {
        dispatch!(self, m => m.project())
    }
    fn check_row(&self, y: &[f64]) -> Result<()> {
        dispatch!(self, m => m.check_row(y))
    }
}
