use serde::{Deserialize, Serialize};

use super::emission::{EmissionModel, EmissionParams};
use super::transition::{RealizedTransitions, TransitionModel};
use crate::error::{HmmError, Result};

/// Full parameter record: emission parameters `θ` and transition logits `η`.
///
/// The flat view lists the free emission coordinates first, then the free
/// transition coordinates. Pinned and masked coordinates never appear in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams<E = EmissionParams> {
    pub emission: E,
    pub transitions: TransitionModel,
}

impl<E: EmissionModel> HmmParams<E> {
    pub fn new(emission: E, transitions: TransitionModel) -> Result<Self> {
        let p = HmmParams { emission, transitions };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.transitions.validate()?;
        let (a, b) = (self.emission.n_states(), self.transitions.n_states());
        if a != b {
            return Err(HmmError::Dimension { what: "state count (emission vs transition)", expected: b, got: a });
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.transitions.n_states()
    }

    pub fn theta_dim(&self) -> usize {
        self.emission.free_dim()
    }

    pub fn eta_dim(&self) -> usize {
        self.transitions.free_dim()
    }

    pub fn dim(&self) -> usize {
        self.theta_dim() + self.eta_dim()
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.theta_dim());
        self.emission.pack(&mut v);
        v
    }

    pub fn eta(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.eta_dim());
        self.transitions.pack(&mut v);
        v
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        self.emission.pack(&mut v);
        self.transitions.pack(&mut v);
        v
    }

    pub fn set_flat(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(HmmError::Dimension { what: "flat parameter vector", expected: self.dim(), got: x.len() });
        }
        let k = self.theta_dim();
        self.emission.unpack(&x[..k])?;
        self.transitions.unpack(&x[k..])
    }

    pub fn with_flat(&self, x: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(x)?;
        Ok(p)
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        self.emission.unpack(theta)
    }

    pub fn set_eta(&mut self, eta: &[f64]) -> Result<()> {
        self.transitions.unpack(eta)
    }

    pub fn realize(&self) -> Result<RealizedTransitions> {
        self.transitions.realize()
    }
}
