use serde::{Deserialize, Serialize};

use crate::error::{HmmError, Result};
use crate::model::{EmissionModel, BETWEEN, WITHIN};

/// An observation sequence stored row-major, `len × dim`.
///
/// `boundary[t]` marks that the transition into `t` crosses a dive boundary.
/// It is empty for homogeneous chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub boundary: Vec<bool>,
}

impl Observations {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(HmmError::config(format!("{} values do not form rows of width {dim}", values.len())));
        }
        let len = values.len() / dim;
        if len == 0 {
            return Err(HmmError::config("empty observation sequence"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HmmError::config("observations contain NaN or infinite values"));
        }
        Ok(Observations { len, dim, values, boundary: Vec::new() })
    }

    /// Depth changes and dive-end indicators. A new dive starts at `t` when
    /// the previous observation ended a dive.
    pub fn dives(depth_change: &[f64], dive_end: &[bool]) -> Result<Self> {
        if depth_change.len() != dive_end.len() {
            return Err(HmmError::Dimension { what: "dive-end indicators", expected: depth_change.len(), got: dive_end.len() });
        }
        let values = depth_change
            .iter()
            .zip(dive_end)
            .flat_map(|(&d, &e)| [d, if e { 1.0 } else { 0.0 }])
            .collect();
        let mut obs = Observations::new(2, values)?;
        obs.boundary = (0..obs.len).map(|t| t > 0 && dive_end[t - 1]).collect();
        Ok(obs)
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Transition regime used to move from `t - 1` to `t`.
    #[inline]
    pub fn regime(&self, t: usize) -> usize {
        if self.boundary.get(t).copied().unwrap_or(false) {
            BETWEEN
        } else {
            WITHIN
        }
    }

    pub fn is_structured(&self) -> bool {
        !self.boundary.is_empty()
    }

    /// Checks that the data fit a model.
    pub fn check_against<E: EmissionModel>(&self, emission: &E, n_regimes: usize) -> Result<()> {
        if self.dim != emission.obs_dim() {
            return Err(HmmError::Dimension { what: "observation columns", expected: emission.obs_dim(), got: self.dim });
        }
        for t in 0..self.len {
            emission.check_row(self.row(t))?;
        }
        if n_regimes > 1 && !self.is_structured() {
            return Err(HmmError::config("structured transitions need dive-end indicators"));
        }
        Ok(())
    }

    /// Whether column `k` holds a single repeated value.
    pub fn is_constant_column(&self, k: usize) -> bool {
        let first = self.values[k];
        (0..self.len).all(|t| self.row(t)[k] == first)
    }

    /// Per-column mean and (population) variance.
    pub fn column_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len as f64;
        let mut mean = vec![0.0; self.dim];
        for t in 0..self.len {
            for (m, v) in mean.iter_mut().zip(self.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for t in 0..self.len {
            for k in 0..self.dim {
                let z = self.row(t)[k] - mean[k];
                var[k] += z * z / n;
            }
        }
        (mean, var)
    }
}
