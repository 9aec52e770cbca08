//! Variance-reduced stochastic optimization over a finite sum
//! `F = (1/T) Σ F_t`, with SVRG or SAGA gradient tables, a per-block
//! Lipschitz line search and an optional per-index refresh hook.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HmmError, Result};
use crate::posterior::EpochMeter;

/// Gradient below this norm skips the line search.
pub const LINE_SEARCH_MIN_NORM: f64 = 1e-8;
/// Maximum doublings of a Lipschitz estimate in one check.
pub const MAX_DOUBLINGS: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Svrg,
    Saga,
}

/// The two parameter blocks: emission coordinates first, then transition
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Theta,
    Eta,
}

/// A finite sum of `n_terms` losses over a flat point `x = [θ, η]` whose
/// terms separate as `F_t(x) = G_t(θ) + H_t(η)`.
pub trait FiniteSum {
    fn n_terms(&self) -> usize;
    fn theta_dim(&self) -> usize;
    fn eta_dim(&self) -> usize;
    /// Moves the objective to `x`.
    fn set_point(&mut self, x: &[f64]) -> Result<()>;
    /// Clamps `x` into the admissible region.
    fn project(&self, _x: &mut [f64]) {}
    /// Per-index refresh before the gradient at `t` is formed.
    fn refresh(&mut self, _t: usize) -> Result<()> {
        Ok(())
    }
    /// Writes `∇F_t` at the current point into `out`.
    fn grad_t(&self, t: usize, out: &mut [f64]) -> Result<()>;
    /// `G_t` or `H_t` at block value `x_block`, with the same weights as the
    /// current gradient.
    fn block_loss_t(&self, t: usize, block: Block, x_block: &[f64]) -> Result<f64>;
}

/// Stored per-index gradients and their running mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    pub dim: usize,
    pub per_index: Vec<f64>,
    pub mean: Vec<f64>,
}

impl GradientStore {
    /// Evaluates every `∇F_t` at the objective's current point. Costs one
    /// epoch.
    pub fn init<F: FiniteSum>(obj: &F, meter: &mut EpochMeter) -> Result<Self> {
        let (n, dim) = (obj.n_terms(), obj.theta_dim() + obj.eta_dim());
        let mut per_index = vec![0.0; n * dim];
        let mut mean = vec![0.0; dim];
        for t in 0..n {
            let g = &mut per_index[t * dim..(t + 1) * dim];
            obj.grad_t(t, g)?;
            check_finite(g, t)?;
            for (m, v) in mean.iter_mut().zip(g.iter()) {
                *m += v;
            }
        }
        let inv = 1.0 / n as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        meter.charge_pass();
        Ok(GradientStore { dim, per_index, mean })
    }

    pub fn get(&self, t: usize) -> &[f64] {
        &self.per_index[t * self.dim..(t + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.per_index.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.per_index.is_empty()
    }

    /// Replaces entry `t` and updates the mean incrementally.
    fn replace(&mut self, t: usize, g: &[f64]) {
        let inv = 1.0 / self.len() as f64;
        let slot = &mut self.per_index[t * self.dim..(t + 1) * self.dim];
        for ((m, s), &v) in self.mean.iter_mut().zip(slot.iter_mut()).zip(g) {
            *m += (v - *s) * inv;
            *s = v;
        }
    }

    /// Arithmetic mean recomputed from scratch.
    pub fn recomputed_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for t in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.get(t)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

fn check_finite(g: &[f64], t: usize) -> Result<()> {
    match g.iter().position(|v| !v.is_finite()) {
        Some(coordinate) => Err(HmmError::NonFiniteGradient { t, coordinate }),
        None => Ok(()),
    }
}

/// Lipschitz estimates for the two blocks and the step-size divider. The
/// step for a block is `1 / (divider · L̂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub lipschitz_theta: f64,
    pub lipschitz_eta: f64,
    pub divider: f64,
}

impl StepSizes {
    pub const INITIAL_DIVIDER: f64 = 3.0;

    pub fn new(lipschitz: f64) -> Self {
        StepSizes { lipschitz_theta: lipschitz, lipschitz_eta: lipschitz, divider: Self::INITIAL_DIVIDER }
    }

    /// Estimates that give the step `lambda` for both blocks at the initial
    /// divider.
    pub fn from_step(lambda: f64) -> Self {
        Self::new(1.0 / (Self::INITIAL_DIVIDER * lambda))
    }

    pub fn lambda_theta(&self) -> f64 {
        1.0 / (self.divider * self.lipschitz_theta)
    }

    pub fn lambda_eta(&self) -> f64 {
        1.0 / (self.divider * self.lipschitz_eta)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.lipschitz_theta) && ok(self.lipschitz_eta) && ok(self.divider) {
            Ok(())
        } else {
            Err(HmmError::config(format!("step sizes must be positive and finite: {self:?}")))
        }
    }
}

/// Draws indices without replacement, reshuffling after every full pass.
#[derive(Debug, Clone)]
pub struct IndexSampler {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl IndexSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        IndexSampler { rng: ChaCha8Rng::seed_from_u64(seed), perm: (0..n).collect(), pos: n }
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }
}

/// Doubles `lhat` until `f(x - g/L̂) ≤ f(x) - ‖g‖²/(2L̂)`; returns the
/// number of doublings. Skipped when `‖g‖` is below
/// [`LINE_SEARCH_MIN_NORM`].
pub fn lipschitz_check(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], g: &[f64], lhat: &mut f64, t: usize) -> Result<u32> {
    let sq: f64 = g.iter().map(|v| v * v).sum();
    if sq.sqrt() < LINE_SEARCH_MIN_NORM {
        return Ok(0);
    }
    let f0 = f(x)?;
    let mut trial = vec![0.0; x.len()];
    for k in 0..=MAX_DOUBLINGS {
        for ((y, &xi), &gi) in trial.iter_mut().zip(x).zip(g) {
            *y = xi - gi / *lhat;
        }
        let f1 = f(&trial)?;
        if f1 <= f0 - sq / (2.0 * *lhat) {
            return Ok(k);
        }
        if k == MAX_DOUBLINGS {
            break;
        }
        *lhat *= 2.0;
    }
    Err(HmmError::LipschitzCap { t, estimate: *lhat })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrsoConfig {
    pub algorithm: Algorithm,
    /// Refresh the posterior at each sampled index before its gradient.
    pub partial_e: bool,
    /// Iterations per M step.
    pub iterations: usize,
    /// Line search and decay of the Lipschitz estimates. Off gives constant
    /// steps.
    pub adaptive: bool,
}

/// Runs `cfg.iterations` variance-reduced steps from `x`, which must be the
/// objective's current point. `store` must hold gradients for that point.
pub fn vrso<F: FiniteSum>(
    obj: &mut F,
    x: &mut [f64],
    store: &mut GradientStore,
    steps: &mut StepSizes,
    cfg: &VrsoConfig,
    sampler: &mut IndexSampler,
    meter: &mut EpochMeter,
) -> Result<()> {
    steps.validate()?;
    let (n, dt) = (obj.n_terms(), obj.theta_dim());
    let dim = dt + obj.eta_dim();
    if x.len() != dim || store.dim != dim || store.len() != n {
        return Err(HmmError::Dimension { what: "optimizer state", expected: dim, got: x.len() });
    }
    let decay = 2f64.powf(-1.0 / n as f64);
    let mut g = vec![0.0; dim];
    for _ in 0..cfg.iterations {
        let t = sampler.next_index();
        if cfg.partial_e {
            obj.refresh(t)?;
            meter.charge_items(1);
        }
        obj.grad_t(t, &mut g)?;
        meter.charge_items(1);
        check_finite(&g, t)?;

        if cfg.adaptive {
            let o = &*obj;
            if dt > 0 {
                lipschitz_check(|v| o.block_loss_t(t, Block::Theta, v), &x[..dt], &g[..dt], &mut steps.lipschitz_theta, t)?;
            }
            if dim > dt {
                lipschitz_check(|v| o.block_loss_t(t, Block::Eta, v), &x[dt..], &g[dt..], &mut steps.lipschitz_eta, t)?;
            }
        }

        let (lt, le) = (steps.lambda_theta(), steps.lambda_eta());
        let stored = store.get(t);
        for k in 0..dim {
            let dir = g[k] - stored[k] + store.mean[k];
            x[k] -= if k < dt { lt } else { le } * dir;
        }
        if cfg.algorithm == Algorithm::Saga {
            store.replace(t, &g);
        }
        if cfg.adaptive {
            steps.lipschitz_theta *= decay;
            steps.lipschitz_eta *= decay;
        }
        obj.project(x);
        obj.set_point(x)?;
    }
    Ok(())
}
