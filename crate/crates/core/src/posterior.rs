//! Scaled forward-backward recursions, posterior weights and the
//! single-index refresh used by the partial E step.
//!
//! `alpha[t]` is the forward vector normalized to sum 1 and `log_c[t]` the
//! log of the normalizer removed at `t`, so the log-likelihood is
//! `Σ log_c[t]`. `beta[t]` is the backward vector rescaled to sum 1; only
//! ratios of it are ever used. Full E steps and single-index refreshes share
//! the same step functions, so a refresh at unchanged parameters reproduces
//! the full pass exactly.

use serde::{Deserialize, Serialize};

use crate::data::Observations;
use crate::error::{HmmError, Result};
use crate::model::{EmissionModel, HmmParams, RealizedTransitions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCache {
    pub n: usize,
    pub len: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    /// Row-major `n × n` per time step; the slot for `t = 0` is unused.
    xi: Vec<f64>,
    log_c: Vec<f64>,
}

impl PosteriorCache {
    pub fn alpha(&self, t: usize) -> &[f64] {
        &self.alpha[t * self.n..(t + 1) * self.n]
    }

    pub fn beta(&self, t: usize) -> &[f64] {
        &self.beta[t * self.n..(t + 1) * self.n]
    }

    pub fn gamma(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.n..(t + 1) * self.n]
    }

    /// Pairwise posterior for the transition into `t`; `None` at `t = 0`.
    pub fn xi(&self, t: usize) -> Option<&[f64]> {
        let nn = self.n * self.n;
        (t > 0).then(|| &self.xi[t * nn..(t + 1) * nn])
    }

    pub fn log_normalizers(&self) -> &[f64] {
        &self.log_c
    }

    /// Sum of the stored log normalizers. Equal to the log-likelihood when
    /// the cache comes from a full E step.
    pub fn log_likelihood(&self) -> f64 {
        self.log_c.iter().sum()
    }

    fn alpha_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.alpha[t * self.n..(t + 1) * self.n]
    }

    fn beta_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.beta[t * self.n..(t + 1) * self.n]
    }
}

/// Emission densities at `t` divided by `exp(shift)`; returns `shift`.
fn emission_scaled<E: EmissionModel>(emission: &E, obs: &Observations, t: usize, out: &mut [f64]) -> Result<f64> {
    emission.log_density_row(obs.row(t), out);
    let shift = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY || shift.is_nan() {
        return Err(HmmError::DegenerateLikelihood { t });
    }
    for v in out.iter_mut() {
        *v = (*v - shift).exp();
    }
    Ok(shift)
}

/// Normalizes `v` in place and returns the removed sum.
fn normalize(v: &mut [f64], t: usize) -> Result<f64> {
    let s: f64 = v.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(HmmError::DegenerateLikelihood { t });
    }
    for x in v.iter_mut() {
        *x /= s;
    }
    Ok(s)
}

/// `out = normalize(prev · Γ ⊙ e)`, or `normalize(δ ⊙ e)` when `prev` is
/// `None`; returns the log of the removed normalizer.
fn forward_step(prev: Option<&[f64]>, trans: &RealizedTransitions, regime: usize, e: &[f64], shift: f64, t: usize, out: &mut [f64]) -> Result<f64> {
    let n = out.len();
    match prev {
        None => {
            for j in 0..n {
                out[j] = trans.delta[j] * e[j];
            }
        }
        Some(prev) => {
            let g = trans.matrix(regime);
            out.fill(0.0);
            for (i, &a) in prev.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &g[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += a * row[j];
                }
            }
            for j in 0..n {
                out[j] *= e[j];
            }
        }
    }
    Ok(normalize(out, t)?.ln() + shift)
}

/// `out = normalize(Γ_{t+1} · (e_{t+1} ⊙ next))`, or uniform when `next` is
/// `None`.
fn backward_step(next: Option<(&[f64], &[f64])>, trans: &RealizedTransitions, regime: usize, t: usize, out: &mut [f64]) -> Result<()> {
    let n = out.len();
    match next {
        None => out.fill(1.0 / n as f64),
        Some((next, e)) => {
            let g = trans.matrix(regime);
            for i in 0..n {
                let row = &g[i * n..(i + 1) * n];
                let mut s = 0.0;
                for j in 0..n {
                    s += row[j] * e[j] * next[j];
                }
                out[i] = s;
            }
            normalize(out, t)?;
        }
    }
    Ok(())
}

fn gamma_from(alpha: &[f64], beta: &[f64], t: usize, out: &mut [f64]) -> Result<()> {
    for ((o, a), b) in out.iter_mut().zip(alpha).zip(beta) {
        *o = a * b;
    }
    normalize(out, t).map(|_| ())
}

fn xi_from(alpha_prev: &[f64], trans: &RealizedTransitions, regime: usize, e: &[f64], beta: &[f64], t: usize, out: &mut [f64]) -> Result<()> {
    let n = alpha_prev.len();
    let g = trans.matrix(regime);
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = alpha_prev[i] * g[i * n + j] * e[j] * beta[j];
        }
    }
    normalize(out, t).map(|_| ())
}

/// Full scaled forward-backward pass with posterior weights.
pub fn e_step<E: EmissionModel>(params: &HmmParams<E>, obs: &Observations) -> Result<PosteriorCache> {
    let trans = params.realize()?;
    e_step_with(params, &trans, obs)
}

pub(crate) fn e_step_with<E: EmissionModel>(params: &HmmParams<E>, trans: &RealizedTransitions, obs: &Observations) -> Result<PosteriorCache> {
    let (n, len) = (params.n_states(), obs.len);
    let mut cache = PosteriorCache {
        n,
        len,
        alpha: vec![0.0; len * n],
        beta: vec![0.0; len * n],
        gamma: vec![0.0; len * n],
        xi: vec![0.0; len * n * n],
        log_c: vec![0.0; len],
    };
    let mut em = vec![0.0; len * n];
    let mut shifts = vec![0.0; len];
    for t in 0..len {
        shifts[t] = emission_scaled(&params.emission, obs, t, &mut em[t * n..(t + 1) * n])?;
    }

    for t in 0..len {
        let (head, tail) = cache.alpha.split_at_mut(t * n);
        let prev = (t > 0).then(|| &head[(t - 1) * n..]);
        cache.log_c[t] = forward_step(prev, trans, obs.regime(t), &em[t * n..(t + 1) * n], shifts[t], t, &mut tail[..n])?;
    }
    for t in (0..len).rev() {
        let (head, tail) = cache.beta.split_at_mut((t + 1) * n);
        let next = (t + 1 < len).then(|| (&tail[..n], &em[(t + 1) * n..(t + 2) * n]));
        let regime = if t + 1 < len { obs.regime(t + 1) } else { 0 };
        backward_step(next, trans, regime, t, &mut head[t * n..])?;
    }
    let nn = n * n;
    for t in 0..len {
        let r = t * n..(t + 1) * n;
        gamma_from(&cache.alpha[r.clone()], &cache.beta[r.clone()], t, &mut cache.gamma[r])?;
        if t > 0 {
            let (a, b) = (&cache.alpha[(t - 1) * n..t * n], &cache.beta[t * n..(t + 1) * n]);
            xi_from(a, trans, obs.regime(t), &em[t * n..(t + 1) * n], b, t, &mut cache.xi[t * nn..(t + 1) * nn])?;
        }
    }
    Ok(cache)
}

/// Forward pass only.
pub fn log_likelihood<E: EmissionModel>(params: &HmmParams<E>, obs: &Observations) -> Result<f64> {
    let trans = params.realize()?;
    log_likelihood_with(params, &trans, obs)
}

pub(crate) fn log_likelihood_with<E: EmissionModel>(params: &HmmParams<E>, trans: &RealizedTransitions, obs: &Observations) -> Result<f64> {
    let n = params.n_states();
    let mut e = vec![0.0; n];
    let mut prev = vec![0.0; n];
    let mut cur = vec![0.0; n];
    let mut ll = 0.0;
    for t in 0..obs.len {
        let shift = emission_scaled(&params.emission, obs, t, &mut e)?;
        ll += forward_step((t > 0).then_some(&prev[..]), trans, obs.regime(t), &e, shift, t, &mut cur)?;
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(ll)
}

/// Refreshes the forward, backward and posterior entries at `t` from the
/// neighbouring cached vectors and the current parameters. Neighbours are
/// used as stored, even if they were computed under older parameters.
pub fn tilde_update<E: EmissionModel>(t: usize, cache: &mut PosteriorCache, params: &HmmParams<E>, trans: &RealizedTransitions, obs: &Observations) -> Result<()> {
    let n = cache.n;
    let len = cache.len;
    let mut e_t = vec![0.0; n];
    let shift = emission_scaled(&params.emission, obs, t, &mut e_t)?;

    let mut alpha = vec![0.0; n];
    let prev = (t > 0).then(|| cache.alpha(t - 1).to_vec());
    cache.log_c[t] = forward_step(prev.as_deref(), trans, obs.regime(t), &e_t, shift, t, &mut alpha)?;
    cache.alpha_mut(t).copy_from_slice(&alpha);

    let mut beta = vec![0.0; n];
    if t + 1 < len {
        let mut e_next = vec![0.0; n];
        emission_scaled(&params.emission, obs, t + 1, &mut e_next)?;
        let next = cache.beta(t + 1).to_vec();
        backward_step(Some((&next, &e_next)), trans, obs.regime(t + 1), t, &mut beta)?;
    } else {
        backward_step(None, trans, 0, t, &mut beta)?;
    }
    cache.beta_mut(t).copy_from_slice(&beta);

    let mut g = vec![0.0; n];
    gamma_from(&alpha, &beta, t, &mut g)?;
    cache.gamma[t * n..(t + 1) * n].copy_from_slice(&g);
    if let Some(prev) = prev {
        let nn = n * n;
        let mut x = vec![0.0; nn];
        xi_from(&prev, trans, obs.regime(t), &e_t, &beta, t, &mut x)?;
        cache.xi[t * nn..(t + 1) * nn].copy_from_slice(&x);
    }
    Ok(())
}

/// Most probable state per time step under the marginal posteriors; ties go
/// to the lowest index.
pub fn posterior_decode(cache: &PosteriorCache) -> Vec<usize> {
    (0..cache.len)
        .map(|t| {
            let g = cache.gamma(t);
            let mut best = 0;
            for (i, &v) in g.iter().enumerate() {
                if v > g[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Work counter in units where one pass over all `T` time steps is one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpochMeter {
    pub len: u64,
    pub ticks: u64,
}

impl EpochMeter {
    pub fn new(len: usize) -> Self {
        EpochMeter { len: len as u64, ticks: 0 }
    }

    /// One full pass: an E step, a full gradient or a store initialization.
    pub fn charge_pass(&mut self) {
        self.ticks += self.len;
    }

    /// Single-index work: one stochastic gradient or one tilde update.
    pub fn charge_items(&mut self, k: usize) {
        self.ticks += k as u64;
    }

    pub fn epochs(&self) -> f64 {
        self.ticks as f64 / self.len as f64
    }
}
