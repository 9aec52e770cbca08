//! The HMM surrogate exposed as a [`FiniteSum`] for the stochastic M step.

use crate::data::Observations;
use crate::error::Result;
use crate::model::{EmissionModel, HmmParams, RealizedTransitions};
use crate::posterior::{tilde_update, PosteriorCache};
use crate::surrogate::{eta_loss_t, grad_loss_t_into, WeightSlice};
use crate::vrso::{Block, FiniteSum};

/// Surrogate with weights held in `cache`. With the refresh hook enabled by
/// the optimizer, `cache` is updated one index at a time under the current
/// parameters.
#[derive(Debug, Clone)]
pub struct HmmObjective<'a, E: EmissionModel> {
    pub params: HmmParams<E>,
    pub cache: PosteriorCache,
    trans: RealizedTransitions,
    obs: &'a Observations,
}

impl<'a, E: EmissionModel> HmmObjective<'a, E> {
    pub fn new(params: HmmParams<E>, cache: PosteriorCache, obs: &'a Observations) -> Result<Self> {
        let trans = params.realize()?;
        Ok(HmmObjective { params, cache, trans, obs })
    }

    pub fn transitions(&self) -> &RealizedTransitions {
        &self.trans
    }

    fn weights(&self, t: usize) -> WeightSlice<'_> {
        self.cache.weights(t)
    }
}

impl<E: EmissionModel> FiniteSum for HmmObjective<'_, E> {
    fn n_terms(&self) -> usize {
        self.obs.len
    }

    fn theta_dim(&self) -> usize {
        self.params.theta_dim()
    }

    fn eta_dim(&self) -> usize {
        self.params.eta_dim()
    }

    fn set_point(&mut self, x: &[f64]) -> Result<()> {
        self.params.set_flat(x)?;
        self.trans = self.params.realize()?;
        Ok(())
    }

    fn project(&self, x: &mut [f64]) {
        let k = self.params.theta_dim();
        let mut e = self.params.emission.clone();
        if e.unpack(&x[..k]).is_ok() {
            e.project();
            let mut v = Vec::with_capacity(k);
            e.pack(&mut v);
            x[..k].copy_from_slice(&v);
        }
    }

    fn refresh(&mut self, t: usize) -> Result<()> {
        tilde_update(t, &mut self.cache, &self.params, &self.trans, self.obs)
    }

    fn grad_t(&self, t: usize, out: &mut [f64]) -> Result<()> {
        let (theta, eta) = out.split_at_mut(self.params.theta_dim());
        grad_loss_t_into(&self.params, &self.trans, self.obs, t, self.weights(t), theta, eta)
    }

    fn block_loss_t(&self, t: usize, block: Block, v: &[f64]) -> Result<f64> {
        let w = self.weights(t);
        match block {
            Block::Theta => {
                let mut e = self.params.emission.clone();
                e.unpack(v)?;
                e.weighted_nll(self.obs.row(t), w.gamma, t)
            }
            Block::Eta => {
                let mut tm = self.params.transitions.clone();
                tm.unpack(v)?;
                eta_loss_t(&tm.realize()?, self.obs, t, w)
            }
        }
    }
}
