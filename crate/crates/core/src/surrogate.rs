//! The finite-sum surrogate `F = (1/T) Σ F_t` built from fixed posterior
//! weights, split into an emission part `G_t(θ)` and a transition part
//! `H_t(η)`.

use serde::{Deserialize, Serialize};

use crate::data::Observations;
use crate::error::{HmmError, Result};
use crate::model::{EmissionModel, HmmParams, RealizedTransitions};
use crate::posterior::PosteriorCache;

/// Posterior weights for one time step. `xi` is absent at `t = 0`.
#[derive(Debug, Clone, Copy)]
pub struct WeightSlice<'a> {
    pub gamma: &'a [f64],
    pub xi: Option<&'a [f64]>,
}

impl PosteriorCache {
    pub fn weights(&self, t: usize) -> WeightSlice<'_> {
        WeightSlice { gamma: self.gamma(t), xi: self.xi(t) }
    }
}

/// Gradient over the free emission coordinates and the free transition
/// coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitGradient {
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
}

impl SplitGradient {
    pub fn zeros(theta_dim: usize, eta_dim: usize) -> Self {
        SplitGradient { theta: vec![0.0; theta_dim], eta: vec![0.0; eta_dim] }
    }

    pub fn for_params<E: EmissionModel>(p: &HmmParams<E>) -> Self {
        Self::zeros(p.theta_dim(), p.eta_dim())
    }

    pub fn fill(&mut self, v: f64) {
        self.theta.fill(v);
        self.eta.fill(v);
    }

    pub fn norm(&self) -> f64 {
        self.theta.iter().chain(&self.eta).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.eta).copied().collect()
    }
}

/// `G_t(θ) = -Σ_i γ_i log f_i(y_t)`.
pub fn theta_loss_t<E: EmissionModel>(params: &HmmParams<E>, obs: &Observations, t: usize, w: WeightSlice<'_>) -> Result<f64> {
    params.emission.weighted_nll(obs.row(t), w.gamma, t)
}

/// `H_t(η)`: `-Σ γ_i log δ_i` at `t = 0`, otherwise `-Σ ξ_ij log Γ_ij`.
pub fn eta_loss_t(trans: &RealizedTransitions, obs: &Observations, t: usize, w: WeightSlice<'_>) -> Result<f64> {
    match (t, w.xi) {
        (0, _) => trans.initial_loss(w.gamma),
        (_, Some(xi)) => trans.transition_loss(obs.regime(t), xi, t),
        (_, None) => Err(HmmError::config(format!("missing pairwise weights at t={t}"))),
    }
}

pub fn loss_t<E: EmissionModel>(params: &HmmParams<E>, obs: &Observations, t: usize, w: WeightSlice<'_>) -> Result<f64> {
    let trans = params.realize()?;
    loss_t_with(params, &trans, obs, t, w)
}

pub(crate) fn loss_t_with<E: EmissionModel>(params: &HmmParams<E>, trans: &RealizedTransitions, obs: &Observations, t: usize, w: WeightSlice<'_>) -> Result<f64> {
    Ok(theta_loss_t(params, obs, t, w)? + eta_loss_t(trans, obs, t, w)?)
}

/// Gradient of `F_t` over the free coordinates.
pub fn grad_loss_t<E: EmissionModel>(params: &HmmParams<E>, obs: &Observations, t: usize, w: WeightSlice<'_>) -> Result<SplitGradient> {
    let trans = params.realize()?;
    let mut g = SplitGradient::for_params(params);
    grad_loss_t_into(params, &trans, obs, t, w, &mut g.theta, &mut g.eta)?;
    Ok(g)
}

/// Overwrites `theta` and `eta` with the two blocks of `∇F_t`.
pub(crate) fn grad_loss_t_into<E: EmissionModel>(
    params: &HmmParams<E>,
    trans: &RealizedTransitions,
    obs: &Observations,
    t: usize,
    w: WeightSlice<'_>,
    theta: &mut [f64],
    eta: &mut [f64],
) -> Result<()> {
    theta.fill(0.0);
    eta.fill(0.0);
    params.emission.weighted_nll_grad(obs.row(t), w.gamma, t, theta)?;
    match (t, w.xi) {
        (0, _) => trans.initial_grad(w.gamma, eta),
        (_, Some(xi)) => trans.transition_grad(obs.regime(t), xi, t, eta),
        (_, None) => Err(HmmError::config(format!("missing pairwise weights at t={t}"))),
    }
}

/// Mean of the per-index gradients under the cached weights. At weights
/// computed from `params` itself this is `-(1/T) ∇ log p(y; φ)`.
pub fn full_grad<E: EmissionModel>(params: &HmmParams<E>, cache: &PosteriorCache, obs: &Observations) -> Result<SplitGradient> {
    let trans = params.realize()?;
    full_grad_with(params, &trans, cache, obs)
}

pub(crate) fn full_grad_with<E: EmissionModel>(params: &HmmParams<E>, trans: &RealizedTransitions, cache: &PosteriorCache, obs: &Observations) -> Result<SplitGradient> {
    let mut total = SplitGradient::for_params(params);
    let mut g = total.clone();
    for t in 0..obs.len {
        grad_loss_t_into(params, trans, obs, t, cache.weights(t), &mut g.theta, &mut g.eta)?;
        for (a, b) in total.theta.iter_mut().zip(&g.theta) {
            *a += b;
        }
        for (a, b) in total.eta.iter_mut().zip(&g.eta) {
            *a += b;
        }
    }
    let inv = 1.0 / obs.len as f64;
    total.theta.iter_mut().chain(total.eta.iter_mut()).for_each(|v| *v *= inv);
    Ok(total)
}

/// `F(φ | w) = (1/T) Σ_t F_t`.
pub fn surrogate_value<E: EmissionModel>(params: &HmmParams<E>, cache: &PosteriorCache, obs: &Observations) -> Result<f64> {
    let trans = params.realize()?;
    surrogate_value_with(params, &trans, cache, obs)
}

pub(crate) fn surrogate_value_with<E: EmissionModel>(params: &HmmParams<E>, trans: &RealizedTransitions, cache: &PosteriorCache, obs: &Observations) -> Result<f64> {
    let mut s = 0.0;
    for t in 0..obs.len {
        s += loss_t_with(params, trans, obs, t, cache.weights(t))?;
    }
    Ok(s / obs.len as f64)
}
