//! Outer EM loops: the likelihood-gated stochastic EM (version 1), the
//! surrogate-gated variant with a contraction threshold (version 2), the
//! surrogate minimum oracle and a full-batch gradient descent baseline.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Observations;
use crate::error::{HmmError, Result};
use crate::model::{EmissionModel, HmmParams};
use crate::objective::HmmObjective;
use crate::posterior::{e_step_with, EpochMeter, PosteriorCache};
use crate::surrogate::{full_grad_with, surrogate_value_with};
use crate::vrso::{lipschitz_check, vrso, Algorithm, GradientStore, IndexSampler, StepSizes, VrsoConfig, LINE_SEARCH_MIN_NORM};

/// Convergence threshold on `‖∇ log p‖ / T`.
pub const CONVERGENCE_TOL: f64 = 1e-2;

/// When the step-size divider doubles under the partial E step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HalvingTrigger {
    /// After an attempt whose likelihood decreased.
    #[default]
    OnFailure,
    /// After an attempt whose likelihood increased.
    OnIncrease,
}

/// Limits on the work a run may do. A run that hits a limit stops cleanly
/// with its last accepted parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Budget {
    pub max_epochs: Option<f64>,
    pub max_time: Option<Duration>,
}

impl Budget {
    fn exhausted(&self, meter: &EpochMeter, start: Instant) -> bool {
        self.max_epochs.is_some_and(|e| meter.epochs() >= e) || self.max_time.is_some_and(|d| start.elapsed() >= d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub algorithm: Algorithm,
    pub partial_e: bool,
    /// Stochastic iterations per M step (`M`).
    pub iterations: usize,
    /// Outer iterations (`K`).
    pub outer: usize,
    pub seed: u64,
    pub max_attempts: usize,
    pub halving: HalvingTrigger,
    pub budget: Budget,
    /// Stop once `‖∇ log p‖ / T` drops below this.
    pub tolerance: Option<f64>,
}

impl FitConfig {
    pub fn new(algorithm: Algorithm, partial_e: bool, iterations: usize, outer: usize, seed: u64) -> Self {
        FitConfig {
            algorithm,
            partial_e,
            iterations,
            outer,
            seed,
            max_attempts: 50,
            halving: HalvingTrigger::OnFailure,
            budget: Budget::default(),
            tolerance: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(HmmError::config("iterations per M step must be positive"));
        }
        if self.max_attempts == 0 {
            return Err(HmmError::config("attempt cap must be positive"));
        }
        Ok(())
    }
}

/// One trace row, written at the start of each outer iteration and once at
/// the end of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: f64,
    pub loglik: f64,
    pub grad_norm_over_t: f64,
    pub k: usize,
    /// Attempts used by the M step that produced this point.
    pub attempt: usize,
    pub halvings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub k: usize,
    pub ell_star: usize,
    pub accepted_loglik: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Iterations,
    Converged,
    Budget,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub attempts: Vec<AttemptRecord>,
    pub stop: StopReason,
}

impl RunTrace {
    fn new() -> Self {
        RunTrace { rows: Vec::new(), attempts: Vec::new(), stop: StopReason::Iterations }
    }

    /// Epoch count of the first row under the convergence threshold.
    pub fn epochs_to_converge(&self, tol: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.grad_norm_over_t < tol).map(|r| r.epoch)
    }

    pub fn final_loglik(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loglik)
    }
}

#[derive(Debug, Clone)]
pub struct Fit<E> {
    pub params: HmmParams<E>,
    pub loglik: f64,
    pub steps: StepSizes,
    pub trace: RunTrace,
    pub epochs: f64,
}

/// A run that aborted, with everything recorded before the failure.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct FitError {
    pub error: HmmError,
    pub trace: RunTrace,
}

impl From<HmmError> for FitError {
    fn from(error: HmmError) -> Self {
        FitError { error, trace: RunTrace { stop: StopReason::Aborted, ..RunTrace::new() } }
    }
}

type FitResult<E> = std::result::Result<Fit<E>, FitError>;

fn abort(error: HmmError, mut trace: RunTrace) -> FitError {
    trace.stop = StopReason::Aborted;
    FitError { error, trace }
}

fn check_inputs<E: EmissionModel>(params: &HmmParams<E>, obs: &Observations) -> Result<()> {
    params.validate()?;
    obs.check_against(&params.emission, params.transitions.n_regimes())
}

/// Log-likelihood at a trial point, with impossible data mapped to `-inf`.
fn trial_e_step<E: EmissionModel>(params: &HmmParams<E>, obs: &Observations) -> Result<Option<PosteriorCache>> {
    let trans = params.realize()?;
    match e_step_with(params, &trans, obs) {
        Ok(c) if c.log_likelihood().is_finite() => Ok(Some(c)),
        Ok(_) | Err(HmmError::DegenerateLikelihood { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Stochastic EM that accepts an M step only if the log-likelihood did not
/// decrease, retrying from the same point otherwise.
pub fn em_vrso_v1<E: EmissionModel>(params: HmmParams<E>, obs: &Observations, steps: StepSizes, cfg: &FitConfig) -> FitResult<E> {
    cfg.validate()?;
    steps.validate()?;
    check_inputs(&params, obs)?;
    let start = Instant::now();
    let mut meter = EpochMeter::new(obs.len);
    let mut sampler = IndexSampler::new(obs.len, cfg.seed);
    let mut trace = RunTrace::new();
    let mut steps = steps;
    let mut phi = params;
    let mut halvings = 0usize;
    let mut last_attempts = 0usize;

    let mut cache = e_step_with(&phi, &phi.realize()?, obs)?;
    meter.charge_pass();
    let mut ll = cache.log_likelihood();
    if !ll.is_finite() {
        return Err(HmmError::DegenerateLikelihood { t: 0 }.into());
    }

    let mut k = 0;
    loop {
        let base = HmmObjective::new(phi.clone(), cache.clone(), obs).map_err(|e| abort(e, trace.clone()))?;
        let store = GradientStore::init(&base, &mut meter).map_err(|e| abort(e, trace.clone()))?;
        let grad_norm = store.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        trace.rows.push(TraceRow { epoch: meter.epochs(), loglik: ll, grad_norm_over_t: grad_norm, k, attempt: last_attempts, halvings });
        if cfg.tolerance.is_some_and(|tol| grad_norm < tol) {
            trace.stop = StopReason::Converged;
            break;
        }
        if k == cfg.outer {
            break;
        }
        if cfg.budget.exhausted(&meter, start) {
            trace.stop = StopReason::Budget;
            break;
        }

        let vcfg = VrsoConfig { algorithm: cfg.algorithm, partial_e: cfg.partial_e, iterations: cfg.iterations, adaptive: true };
        let mut attempt = 0;
        let accepted = loop {
            attempt += 1;
            if attempt > cfg.max_attempts {
                return Err(abort(HmmError::AttemptCap { k, attempts: cfg.max_attempts }, trace));
            }
            let mut obj = base.clone();
            let mut st = store.clone();
            let mut x = phi.to_flat();
            vrso(&mut obj, &mut x, &mut st, &mut steps, &vcfg, &mut sampler, &mut meter).map_err(|e| abort(e, trace.clone()))?;
            let trial = trial_e_step(&obj.params, obs).map_err(|e| abort(e, trace.clone()))?;
            meter.charge_pass();
            match trial {
                Some(c) if c.log_likelihood() >= ll => {
                    if cfg.partial_e && cfg.halving == HalvingTrigger::OnIncrease && c.log_likelihood() > ll {
                        steps.divider *= 2.0;
                        halvings += 1;
                    }
                    break Some((obj.params, c));
                }
                _ => {
                    if cfg.partial_e && cfg.halving == HalvingTrigger::OnFailure {
                        steps.divider *= 2.0;
                        halvings += 1;
                    }
                    if cfg.budget.exhausted(&meter, start) {
                        break None;
                    }
                }
            }
        };
        match accepted {
            Some((p, c)) => {
                phi = p;
                cache = c;
                ll = cache.log_likelihood();
                k += 1;
                last_attempts = attempt;
                trace.attempts.push(AttemptRecord { k, ell_star: attempt, accepted_loglik: ll, halvings });
            }
            None => {
                trace.stop = StopReason::Budget;
                break;
            }
        }
    }
    Ok(Fit { params: phi, loglik: ll, steps, trace, epochs: meter.epochs() })
}

/// Constants for the contraction threshold of version 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct V2Constants {
    /// Lipschitz constant of the per-index surrogate gradients.
    pub lipschitz: f64,
    /// Strong-convexity constant of the surrogate.
    pub convexity: f64,
}

/// `ζ = 1/(C λ M (1 - 2Lλ)) + 2Lλ/(1 - 2Lλ)`; must be below 1.
pub fn zeta(consts: V2Constants, lambda: f64, iterations: usize) -> Result<f64> {
    let (l, c) = (consts.lipschitz, consts.convexity);
    if !(l > 0.0 && c > 0.0 && lambda > 0.0 && iterations > 0) {
        return Err(HmmError::config("contraction constants, step and M must be positive"));
    }
    let q = 1.0 - 2.0 * l * lambda;
    if q <= 0.0 {
        return Err(HmmError::config(format!("step {lambda} too large: 2Lλ = {} ≥ 1", 2.0 * l * lambda)));
    }
    let z = 1.0 / (c * lambda * iterations as f64 * q) + 2.0 * l * lambda / q;
    if z >= 1.0 {
        return Err(HmmError::config(format!("contraction factor ζ = {z} is not below 1")));
    }
    Ok(z)
}

/// Result of minimizing the fixed-weight surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FStar {
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const ORACLE_TOL: f64 = 1e-8;
pub const ORACLE_MAX_ITERS: usize = 10_000;

/// Minimizes `F(· | w)` for the weights in `cache` by full-batch gradient
/// descent with a per-block line search. The value returned is the best
/// found, an upper bound on the infimum.
pub fn f_star_oracle<E: EmissionModel>(params: &HmmParams<E>, cache: &PosteriorCache, obs: &Observations) -> Result<FStar> {
    let mut p = params.clone();
    let mut lt = 1.0;
    let mut le = 1.0;
    let dt = p.theta_dim();
    let mut iterations = ORACLE_MAX_ITERS;
    for it in 0..ORACLE_MAX_ITERS {
        let trans = p.realize()?;
        let g = full_grad_with(&p, &trans, cache, obs)?;
        let value = surrogate_value_with(&p, &trans, cache, obs)?;
        let norm = g.norm();
        if norm < ORACLE_TOL {
            return Ok(FStar { value, grad_norm: norm, iterations: it, converged: true });
        }
        let x = p.to_flat();
        let start = (lt, le);
        let theta_f = |v: &[f64]| -> Result<f64> {
            let mut q = p.clone();
            q.set_theta(v)?;
            surrogate_value_with(&q, &trans, cache, obs)
        };
        let eta_f = |v: &[f64]| -> Result<f64> {
            let mut q = p.clone();
            q.set_eta(v)?;
            let tr = q.realize()?;
            surrogate_value_with(&q, &tr, cache, obs)
        };
        lipschitz_check(theta_f, &x[..dt], &g.theta, &mut lt, it)?;
        lipschitz_check(eta_f, &x[dt..], &g.eta, &mut le, it)?;
        let mut y = x.clone();
        for (k, v) in y.iter_mut().enumerate() {
            *v -= if k < dt { g.theta[k] / lt } else { g.eta[k - dt] / le };
        }
        p.set_flat(&y)?;
        p.emission.project();
        lt *= 0.5;
        le *= 0.5;
        // Below the resolution of the line search the step rounds away and
        // every later iteration would repeat this one.
        if (lt, le) == start && p.to_flat() == x {
            iterations = it + 1;
            break;
        }
    }
    let trans = p.realize()?;
    let value = surrogate_value_with(&p, &trans, cache, obs)?;
    let grad_norm = full_grad_with(&p, &trans, cache, obs)?.norm();
    if iterations < ORACLE_MAX_ITERS {
        log::debug!("surrogate minimum oracle reached line-search resolution at ‖∇F‖ = {grad_norm:e}");
    } else {
        log::warn!("surrogate minimum oracle stopped at ‖∇F‖ = {grad_norm:e} after {iterations} iterations");
    }
    Ok(FStar { value, grad_norm, iterations, converged: false })
}

/// Stochastic EM that accepts an M step once the surrogate falls below
/// `K = F* + (1+ζ)/2 · (F(φ_k|φ_k) - F*)`. Runs SVRG without the partial E
/// step and with the constant step `lambda`.
pub fn em_vrso_v2<E: EmissionModel>(params: HmmParams<E>, obs: &Observations, lambda: f64, consts: V2Constants, cfg: &FitConfig) -> FitResult<E> {
    cfg.validate()?;
    check_inputs(&params, obs)?;
    if cfg.partial_e || cfg.algorithm != Algorithm::Svrg {
        return Err(HmmError::config("the contraction-threshold variant runs SVRG without the partial E step").into());
    }
    let z = zeta(consts, lambda, cfg.iterations)?;
    let start = Instant::now();
    let mut meter = EpochMeter::new(obs.len);
    let mut sampler = IndexSampler::new(obs.len, cfg.seed);
    let mut trace = RunTrace::new();
    let mut steps = StepSizes::from_step(lambda);
    let mut phi = params;
    let mut last_attempts = 0;

    let mut cache = e_step_with(&phi, &phi.realize()?, obs)?;
    meter.charge_pass();
    let vcfg = VrsoConfig { algorithm: Algorithm::Svrg, partial_e: false, iterations: cfg.iterations, adaptive: false };
    let mut k = 0;
    loop {
        let ll = cache.log_likelihood();
        let base = HmmObjective::new(phi.clone(), cache.clone(), obs).map_err(|e| abort(e, trace.clone()))?;
        let store = GradientStore::init(&base, &mut meter).map_err(|e| abort(e, trace.clone()))?;
        let grad_norm = store.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        trace.rows.push(TraceRow { epoch: meter.epochs(), loglik: ll, grad_norm_over_t: grad_norm, k, attempt: last_attempts, halvings: 0 });
        if cfg.tolerance.is_some_and(|tol| grad_norm < tol) {
            trace.stop = StopReason::Converged;
            break;
        }
        if k == cfg.outer {
            break;
        }
        if cfg.budget.exhausted(&meter, start) {
            trace.stop = StopReason::Budget;
            break;
        }
        let f_k = surrogate_value_with(&phi, base.transitions(), &cache, obs).map_err(|e| abort(e, trace.clone()))?;
        let f_star = f_star_oracle(&phi, &cache, obs).map_err(|e| abort(e, trace.clone()))?.value.min(f_k);
        let threshold = f_star + 0.5 * (1.0 + z) * (f_k - f_star);

        let mut attempt = 0;
        let next = loop {
            attempt += 1;
            if attempt > cfg.max_attempts {
                return Err(abort(HmmError::AttemptCap { k, attempts: cfg.max_attempts }, trace));
            }
            let mut obj = base.clone();
            let mut st = store.clone();
            let mut x = phi.to_flat();
            vrso(&mut obj, &mut x, &mut st, &mut steps, &vcfg, &mut sampler, &mut meter).map_err(|e| abort(e, trace.clone()))?;
            let f_try = surrogate_value_with(&obj.params, obj.transitions(), &cache, obs);
            meter.charge_pass();
            if matches!(f_try, Ok(f) if f <= threshold) {
                break obj.params;
            }
        };
        let trial = trial_e_step(&next, obs).map_err(|e| abort(e, trace.clone()))?;
        meter.charge_pass();
        let Some(c) = trial else {
            return Err(abort(HmmError::DegenerateLikelihood { t: 0 }, trace));
        };
        phi = next;
        cache = c;
        k += 1;
        last_attempts = attempt;
        trace.attempts.push(AttemptRecord { k, ell_star: attempt, accepted_loglik: cache.log_likelihood(), halvings: 0 });
    }
    let ll = cache.log_likelihood();
    Ok(Fit { params: phi, loglik: ll, steps, trace, epochs: meter.epochs() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    /// Gradient steps.
    pub iterations: usize,
    /// Initial Lipschitz estimate for both blocks.
    pub lipschitz: f64,
    pub budget: Budget,
    pub tolerance: Option<f64>,
}

impl GdConfig {
    pub fn new(iterations: usize) -> Self {
        GdConfig { iterations, lipschitz: 1.0, budget: Budget::default(), tolerance: None }
    }
}

/// Growth allowed to the step after an accepted gradient step.
const GD_RELAX: f64 = 0.8;
const GD_MAX_BACKTRACKS: usize = 60;

/// Full-batch gradient descent on `-log p / T`. Each step costs an E step
/// (reused from the previous line search) and a gradient pass; each rejected
/// trial point costs one more pass.
pub fn baseline_gd<E: EmissionModel>(params: HmmParams<E>, obs: &Observations, cfg: &GdConfig) -> FitResult<E> {
    check_inputs(&params, obs)?;
    StepSizes::new(cfg.lipschitz).validate()?;
    let start = Instant::now();
    let n = obs.len as f64;
    let mut meter = EpochMeter::new(obs.len);
    let mut trace = RunTrace::new();
    let mut phi = params;
    let mut trans = phi.realize()?;
    let mut cache = e_step_with(&phi, &trans, obs)?;
    meter.charge_pass();
    let mut ll = cache.log_likelihood();
    let (mut lt, mut le) = (cfg.lipschitz, cfg.lipschitz);
    let dt = phi.theta_dim();

    let mut k = 0;
    loop {
        let g = full_grad_with(&phi, &trans, &cache, obs).map_err(|e| abort(e, trace.clone()))?;
        meter.charge_pass();
        let norm = g.norm();
        trace.rows.push(TraceRow { epoch: meter.epochs(), loglik: ll, grad_norm_over_t: norm, k, attempt: 1, halvings: 0 });
        if cfg.tolerance.is_some_and(|tol| norm < tol) {
            trace.stop = StopReason::Converged;
            break;
        }
        if k == cfg.iterations {
            break;
        }
        if cfg.budget.exhausted(&meter, start) {
            trace.stop = StopReason::Budget;
            break;
        }
        if norm < LINE_SEARCH_MIN_NORM {
            // no descent direction worth resolving in floating point
            k += 1;
            continue;
        }
        let sq_t: f64 = g.theta.iter().map(|v| v * v).sum();
        let sq_e: f64 = g.eta.iter().map(|v| v * v).sum();
        let x = phi.to_flat();
        let mut accepted = None;
        for _ in 0..=GD_MAX_BACKTRACKS {
            let mut y = x.clone();
            for (j, v) in y.iter_mut().enumerate() {
                *v -= if j < dt { g.theta[j] / lt } else { g.eta[j - dt] / le };
            }
            let mut q = phi.with_flat(&y).map_err(|e| abort(e, trace.clone()))?;
            q.emission.project();
            let tr = q.realize().map_err(|e| abort(e, trace.clone()))?;
            let trial = match e_step_with(&q, &tr, obs) {
                Ok(c) => Some(c),
                Err(HmmError::DegenerateLikelihood { .. }) => None,
                Err(e) => return Err(abort(e, trace)),
            };
            meter.charge_pass();
            let want = ll + n * (sq_t / (2.0 * lt) + sq_e / (2.0 * le));
            match trial {
                Some(c) if c.log_likelihood() >= want => {
                    accepted = Some((q, tr, c));
                    break;
                }
                _ => {
                    lt *= 2.0;
                    le *= 2.0;
                }
            }
        }
        let Some((q, tr, c)) = accepted else {
            return Err(abort(HmmError::LipschitzCap { t: k, estimate: lt.max(le) }, trace));
        };
        phi = q;
        trans = tr;
        cache = c;
        ll = cache.log_likelihood();
        lt *= GD_RELAX;
        le *= GD_RELAX;
        k += 1;
    }
    Ok(Fit { params: phi, loglik: ll, steps: StepSizes { lipschitz_theta: lt, lipschitz_eta: le, divider: 1.0 }, trace, epochs: meter.epochs() })
}
