//! Transition and initial-distribution parameterization.
//!
//! Probabilities are row-wise softmaxes of unconstrained logits. Each row has
//! its diagonal logit pinned at zero, the initial distribution has its first
//! logit pinned at zero, and a boolean mask marks entries that are
//! structurally zero. Masked entries never enter a softmax, never appear in
//! the free-coordinate vector and always realize to exactly `0.0`.
//!
//! Two structures are supported: a homogeneous chain with a single logit
//! block, and the hierarchical dive model in which `n_types` coarse dive types
//! each carry an upper-triangular chain over `n_phases` fine dive phases. The
//! dive model switches between a block-diagonal within-dive matrix and a
//! Kronecker-structured between-dive matrix, selected per time step from the
//! dive-end indicators of the data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HmmError, Result};

/// Logits for one transition matrix and its companion initial distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionLogits {
    pub n: usize,
    /// Row-major `n × n`.
    pub eta_gamma: Vec<f64>,
    pub eta_delta: Vec<f64>,
    /// Row-major `n × n`; `true` marks a structural zero.
    pub gamma_mask: Vec<bool>,
    pub delta_mask: Vec<bool>,
}

impl TransitionLogits {
    /// All logits zero and nothing masked: uniform rows and a uniform start.
    pub fn uniform(n: usize) -> Self {
        TransitionLogits {
            n,
            eta_gamma: vec![0.0; n * n],
            eta_delta: vec![0.0; n],
            gamma_mask: vec![false; n * n],
            delta_mask: vec![false; n],
        }
    }

    /// Builds logits that reproduce the given row-stochastic matrix and start
    /// distribution. Zero entries become masked.
    pub fn from_probabilities(gamma: &[f64], delta: &[f64]) -> Result<Self> {
        let n = delta.len();
        if gamma.len() != n * n {
            return Err(HmmError::Dimension {
                what: "transition matrix",
                expected: n * n,
                got: gamma.len(),
            });
        }
        let mut out = TransitionLogits::uniform(n);
        for i in 0..n {
            let diag = gamma[i * n + i];
            if diag <= 0.0 {
                return Err(HmmError::config(format!(
                    "row {i} has a zero diagonal; the pinned diagonal logit needs positive mass"
                )));
            }
            for j in 0..n {
                let p = gamma[i * n + j];
                if p < 0.0 || !p.is_finite() {
                    return Err(HmmError::config(format!("invalid probability {p} at ({i},{j})")));
                }
                if p == 0.0 {
                    out.gamma_mask[i * n + j] = true;
                } else if i != j {
                    out.eta_gamma[i * n + j] = (p / diag).ln();
                }
            }
        }
        if delta[0] <= 0.0 {
            return Err(HmmError::config("initial distribution needs positive mass on state 0"));
        }
        for k in 0..n {
            if delta[k] < 0.0 || !delta[k].is_finite() {
                return Err(HmmError::config(format!("invalid initial probability {}", delta[k])));
            }
            if delta[k] == 0.0 {
                out.delta_mask[k] = true;
            } else if k > 0 {
                out.eta_delta[k] = (delta[k] / delta[0]).ln();
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Upper-triangular structure: entries below the diagonal are masked.
    pub fn mask_lower_triangle(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in 0..i {
                self.gamma_mask[i * n + j] = true;
                self.eta_gamma[i * n + j] = 0.0;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(HmmError::config("transition block with zero states"));
        }
        for (what, got, expected) in [
            ("eta_gamma", self.eta_gamma.len(), n * n),
            ("gamma_mask", self.gamma_mask.len(), n * n),
            ("eta_delta", self.eta_delta.len(), n),
            ("delta_mask", self.delta_mask.len(), n),
        ] {
            if got != expected {
                return Err(HmmError::Dimension { what, expected, got });
            }
        }
        for i in 0..n {
            if self.gamma_mask[i * n..(i + 1) * n].iter().all(|&m| m) {
                return Err(HmmError::config(format!("transition row {i} is fully masked")));
            }
            if self.eta_gamma[i * n + i] != 0.0 {
                return Err(HmmError::config(format!("diagonal logit ({i},{i}) must be pinned at 0")));
            }
        }
        if self.delta_mask.iter().all(|&m| m) {
            return Err(HmmError::config("initial distribution is fully masked"));
        }
        if self.eta_delta[0] != 0.0 {
            return Err(HmmError::config("first initial logit must be pinned at 0"));
        }
        Ok(())
    }

    fn gamma_is_free(&self, i: usize, j: usize) -> bool {
        i != j && !self.gamma_mask[i * self.n + j]
    }

    fn delta_is_free(&self, k: usize) -> bool {
        k != 0 && !self.delta_mask[k]
    }

    pub fn free_dim(&self) -> usize {
        let n = self.n;
        let g = (0..n * n).filter(|&ij| self.gamma_is_free(ij / n, ij % n)).count();
        let d = (0..n).filter(|&k| self.delta_is_free(k)).count();
        g + d
    }

    fn pack(&self, out: &mut Vec<f64>) {
        let n = self.n;
        for ij in 0..n * n {
            if self.gamma_is_free(ij / n, ij % n) {
                out.push(self.eta_gamma[ij]);
            }
        }
        for k in 0..n {
            if self.delta_is_free(k) {
                out.push(self.eta_delta[k]);
            }
        }
    }

    fn unpack(&mut self, src: &[f64]) -> usize {
        let n = self.n;
        let mut pos = 0;
        for ij in 0..n * n {
            if self.gamma_is_free(ij / n, ij % n) {
                self.eta_gamma[ij] = src[pos];
                pos += 1;
            }
        }
        for k in 0..n {
            if self.delta_is_free(k) {
                self.eta_delta[k] = src[pos];
                pos += 1;
            }
        }
        pos
    }

    /// Row-stochastic matrix from the logits.
    pub fn transition_matrix(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = i * n..(i + 1) * n;
            softmax_masked(&self.eta_gamma[row.clone()], &self.gamma_mask[row.clone()], &mut out[row]);
        }
        Ok(out)
    }

    /// Initial distribution from the logits.
    pub fn initial_distribution(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let mut out = vec![0.0; self.n];
        softmax_masked(&self.eta_delta, &self.delta_mask, &mut out);
        Ok(out)
    }
}

/// Max-shifted softmax over the unmasked entries; masked entries get `0.0`.
pub fn softmax_masked(logits: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for ((o, &x), &m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if m { 0.0 } else { (x - max).exp() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log of [`softmax_masked`]; masked entries get `-inf`.
pub fn log_softmax_masked(logits: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| (x - max).exp())
        .sum();
    let log_z = max + sum.ln();
    for ((o, &x), &m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if m { f64::NEG_INFINITY } else { x - log_z };
    }
}

/// Structure of the hidden chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransitionModel {
    Homogeneous(TransitionLogits),
    /// `coarse` is `n_types × n_types` with the dive-type start distribution
    /// in its `eta_delta`; `fine[a]` is the upper-triangular phase chain for
    /// dive type `a`.
    DiveStructured {
        coarse: TransitionLogits,
        fine: Vec<TransitionLogits>,
    },
}

/// Provenance of a realized probability entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Source {
    Masked,
    Logit { block: usize, index: usize },
}

/// Probabilities and log-probabilities of one logit block.
#[derive(Debug, Clone)]
pub(crate) struct BlockProbs {
    pub n: usize,
    pub gamma: Vec<f64>,
    pub log_gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub log_delta: Vec<f64>,
    pub gamma_mask: Vec<bool>,
    pub delta_mask: Vec<bool>,
    /// Position of each free gamma entry in the flat eta vector.
    pub gamma_slot: Vec<Option<usize>>,
    pub delta_slot: Vec<Option<usize>>,
}

/// Everything the recursions and the surrogate need about the chain at one
/// parameter value.
#[derive(Debug, Clone)]
pub struct RealizedTransitions {
    pub n: usize,
    pub delta: Vec<f64>,
    /// One row-major `n × n` matrix per regime.
    pub matrices: Vec<Vec<f64>>,
    pub(crate) delta_src: Vec<Source>,
    pub(crate) sources: Vec<Vec<Source>>,
    pub(crate) blocks: Vec<BlockProbs>,
}

/// Regime index for the within-dive matrix of the dive model (and the only
/// matrix of a homogeneous chain).
pub const WITHIN: usize = 0;
/// Regime index for the between-dive matrix of the dive model.
pub const BETWEEN: usize = 1;

impl TransitionModel {
    /// Dive model with all logits zero: `n_types` coarse states, each with
    /// an upper-triangular `n_phases` chain that starts in phase 0.
    pub fn dive(n_types: usize, n_phases: usize) -> Self {
        let coarse = TransitionLogits::uniform(n_types);
        let fine = (0..n_types).map(|_| fine_block(n_phases)).collect();
        TransitionModel::DiveStructured { coarse, fine }
    }

    pub fn n_states(&self) -> usize {
        match self {
            TransitionModel::Homogeneous(l) => l.n,
            TransitionModel::DiveStructured { coarse, fine } => coarse.n * fine.first().map_or(0, |f| f.n),
        }
    }

    /// Dive types and phases, for the dive model.
    pub fn dive_shape(&self) -> Option<(usize, usize)> {
        match self {
            TransitionModel::Homogeneous(_) => None,
            TransitionModel::DiveStructured { coarse, fine } => Some((coarse.n, fine[0].n)),
        }
    }

    pub fn blocks(&self) -> Vec<&TransitionLogits> {
        match self {
            TransitionModel::Homogeneous(l) => vec![l],
            TransitionModel::DiveStructured { coarse, fine } => std::iter::once(coarse).chain(fine.iter()).collect(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut TransitionLogits> {
        match self {
            TransitionModel::Homogeneous(l) => vec![l],
            TransitionModel::DiveStructured { coarse, fine } => std::iter::once(coarse).chain(fine.iter_mut()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in self.blocks() {
            b.validate()?;
        }
        if let TransitionModel::DiveStructured { coarse, fine } = self {
            if fine.len() != coarse.n {
                return Err(HmmError::Dimension {
                    what: "fine-scale blocks",
                    expected: coarse.n,
                    got: fine.len(),
                });
            }
            let phases = fine[0].n;
            for (a, f) in fine.iter().enumerate() {
                if f.n != phases {
                    return Err(HmmError::config(format!("fine block {a} has {} phases, expected {phases}", f.n)));
                }
                for i in 0..phases {
                    for j in 0..i {
                        if !f.gamma_mask[i * phases + j] {
                            return Err(HmmError::config(format!(
                                "fine block {a} must be upper-triangular; ({i},{j}) is unmasked"
                            )));
                        }
                    }
                }
                if f.delta_mask.iter().skip(1).any(|&m| !m) {
                    return Err(HmmError::config("dives must start in phase 0"));
                }
            }
        }
        Ok(())
    }

    pub fn free_dim(&self) -> usize {
        self.blocks().iter().map(|b| b.free_dim()).sum()
    }

    pub fn pack(&self, out: &mut Vec<f64>) {
        for b in self.blocks() {
            b.pack(out);
        }
    }

    pub fn unpack(&mut self, src: &[f64]) -> Result<()> {
        let expected = self.free_dim();
        if src.len() != expected {
            return Err(HmmError::Dimension {
                what: "transition free coordinates",
                expected,
                got: src.len(),
            });
        }
        let mut pos = 0;
        for b in self.blocks_mut() {
            pos += b.unpack(&src[pos..]);
        }
        Ok(())
    }

    /// Number of distinct realized matrices.
    pub fn n_regimes(&self) -> usize {
        match self {
            TransitionModel::Homogeneous(_) => 1,
            TransitionModel::DiveStructured { .. } => 2,
        }
    }

    /// Realized initial distribution.
    pub fn initial_distribution(&self) -> Result<Vec<f64>> {
        Ok(self.realize()?.delta)
    }

    pub fn realize(&self) -> Result<RealizedTransitions> {
        self.validate()?;
        let mut slot = 0usize;
        let blocks: Vec<BlockProbs> = self
            .blocks()
            .into_iter()
            .map(|b| {
                let n = b.n;
                let gamma = b.transition_matrix()?;
                let mut log_gamma = vec![0.0; n * n];
                for i in 0..n {
                    let r = i * n..(i + 1) * n;
                    log_softmax_masked(&b.eta_gamma[r.clone()], &b.gamma_mask[r.clone()], &mut log_gamma[r]);
                }
                let delta = b.initial_distribution()?;
                let mut log_delta = vec![0.0; n];
                log_softmax_masked(&b.eta_delta, &b.delta_mask, &mut log_delta);
                let gamma_slot = (0..n * n)
                    .map(|ij| {
                        b.gamma_is_free(ij / n, ij % n).then(|| {
                            slot += 1;
                            slot - 1
                        })
                    })
                    .collect();
                let delta_slot = (0..n)
                    .map(|k| {
                        b.delta_is_free(k).then(|| {
                            slot += 1;
                            slot - 1
                        })
                    })
                    .collect();
                Ok(BlockProbs {
                    n,
                    gamma,
                    log_gamma,
                    delta,
                    log_delta,
                    gamma_mask: b.gamma_mask.clone(),
                    delta_mask: b.delta_mask.clone(),
                    gamma_slot,
                    delta_slot,
                })
            })
            .collect::<Result<_>>()?;

        let n = self.n_states();
        let (delta_src, sources) = match self {
            TransitionModel::Homogeneous(_) => {
                let delta_src = (0..n)
                    .map(|k| if blocks[0].delta_mask[k] { Source::Masked } else { Source::Logit { block: 0, index: k } })
                    .collect();
                let src = (0..n * n)
                    .map(|ij| if blocks[0].gamma_mask[ij] { Source::Masked } else { Source::Logit { block: 0, index: ij } })
                    .collect();
                (delta_src, vec![src])
            }
            TransitionModel::DiveStructured { coarse, fine } => {
                let (types, phases) = (coarse.n, fine[0].n);
                let state = |a: usize, p: usize| a * phases + p;
                let mut delta_src = vec![Source::Masked; n];
                for a in 0..types {
                    if !coarse.delta_mask[a] {
                        delta_src[state(a, 0)] = Source::Logit { block: 0, index: a };
                    }
                }
                let mut within = vec![Source::Masked; n * n];
                let mut between = vec![Source::Masked; n * n];
                for a in 0..types {
                    for p in 0..phases {
                        for q in 0..phases {
                            if !fine[a].gamma_mask[p * phases + q] {
                                within[state(a, p) * n + state(a, q)] =
                                    Source::Logit { block: 1 + a, index: p * phases + q };
                            }
                        }
                        for b in 0..types {
                            if !coarse.gamma_mask[a * types + b] {
                                between[state(a, p) * n + state(b, 0)] =
                                    Source::Logit { block: 0, index: a * types + b };
                            }
                        }
                    }
                }
                (delta_src, vec![within, between])
            }
        };

        let lookup = |s: &Source, delta: bool| match *s {
            Source::Masked => 0.0,
            Source::Logit { block, index } => {
                if delta {
                    blocks[block].delta[index]
                } else {
                    blocks[block].gamma[index]
                }
            }
        };
        let delta = delta_src.iter().map(|s| lookup(s, true)).collect();
        let matrices = sources.iter().map(|src| src.iter().map(|s| lookup(s, false)).collect()).collect();
        Ok(RealizedTransitions {
            n,
            delta,
            matrices,
            delta_src,
            sources,
            blocks,
        })
    }
}

fn fine_block(phases: usize) -> TransitionLogits {
    let mut f = TransitionLogits::uniform(phases);
    f.mask_lower_triangle();
    for k in 1..phases {
        f.delta_mask[k] = true;
    }
    f
}

impl RealizedTransitions {
    #[inline]
    pub fn matrix(&self, regime: usize) -> &[f64] {
        &self.matrices[regime]
    }

    pub(crate) fn log_prob(&self, regime: usize, ij: usize) -> f64 {
        match self.sources[regime][ij] {
            Source::Masked => f64::NEG_INFINITY,
            Source::Logit { block, index } => self.blocks[block].log_gamma[index],
        }
    }

    pub(crate) fn log_delta(&self, k: usize) -> f64 {
        match self.delta_src[k] {
            Source::Masked => f64::NEG_INFINITY,
            Source::Logit { block, index } => self.blocks[block].log_delta[index],
        }
    }

    /// `-Σ ξ_ij log Γ_ij` for one transition, with `0·log 0 = 0`.
    pub(crate) fn transition_loss(&self, regime: usize, xi: &[f64], t: usize) -> Result<f64> {
        let mut loss = 0.0;
        for (ij, &w) in xi.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if self.sources[regime][ij] == Source::Masked {
                return Err(HmmError::MaskedWeight { t, what: "transition", weight: w });
            }
            loss -= w * self.log_prob(regime, ij);
        }
        Ok(loss)
    }

    /// `-Σ γ_k log δ_k`, with `0·log 0 = 0`.
    pub(crate) fn initial_loss(&self, gamma: &[f64]) -> Result<f64> {
        let mut loss = 0.0;
        for (k, &w) in gamma.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if self.delta_src[k] == Source::Masked {
                return Err(HmmError::MaskedWeight { t: 0, what: "initial state", weight: w });
            }
            loss -= w * self.log_delta(k);
        }
        Ok(loss)
    }

    /// Adds the eta-gradient of `-Σ ξ_ij log Γ_ij` into `out`.
    pub(crate) fn transition_grad(&self, regime: usize, xi: &[f64], t: usize, out: &mut [f64]) -> Result<()> {
        // per-block weight matrices
        let mut weights: Vec<Vec<f64>> = self.blocks.iter().map(|b| vec![0.0; b.n * b.n]).collect();
        for (ij, &w) in xi.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            match self.sources[regime][ij] {
                Source::Masked => return Err(HmmError::MaskedWeight { t, what: "transition", weight: w }),
                Source::Logit { block, index } => weights[block][index] += w,
            }
        }
        for (b, w) in self.blocks.iter().zip(&weights) {
            let n = b.n;
            for r in 0..n {
                let row = &w[r * n..(r + 1) * n];
                let total: f64 = row.iter().sum();
                if total == 0.0 {
                    continue;
                }
                for c in 0..n {
                    if let Some(s) = b.gamma_slot[r * n + c] {
                        out[s] -= row[c] - total * b.gamma[r * n + c];
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds the eta-gradient of `-Σ γ_k log δ_k` into `out`.
    pub(crate) fn initial_grad(&self, gamma: &[f64], out: &mut [f64]) -> Result<()> {
        let mut weights: Vec<Vec<f64>> = self.blocks.iter().map(|b| vec![0.0; b.n]).collect();
        for (k, &w) in gamma.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            match self.delta_src[k] {
                Source::Masked => return Err(HmmError::MaskedWeight { t: 0, what: "initial state", weight: w }),
                Source::Logit { block, index } => weights[block][index] += w,
            }
        }
        for (b, w) in self.blocks.iter().zip(&weights) {
            let total: f64 = w.iter().sum();
            if total == 0.0 {
                continue;
            }
            for k in 0..b.n {
                if let Some(s) = b.delta_slot[k] {
                    out[s] -= w[k] - total * b.delta[k];
                }
            }
        }
        Ok(())
    }
}

/// Solves `π Γ = π`, `Σ π = 1` for an irreducible row-stochastic `Γ`.
pub fn stationary_distribution(gamma: &[f64], n: usize) -> Result<Vec<f64>> {
    if gamma.len() != n * n || n == 0 {
        return Err(HmmError::Dimension {
            what: "transition matrix",
            expected: n * n,
            got: gamma.len(),
        });
    }
    for i in 0..n {
        let row = &gamma[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (s - 1.0).abs() > 1e-9 {
            return Err(HmmError::config(format!("row {i} is not a probability vector")));
        }
    }
    if !irreducible(gamma, n) {
        return Err(HmmError::NoStationaryDistribution(
            "chain is not irreducible (more than one communicating class)".into(),
        ));
    }
    // (Γᵀ - I) π = 0 with the last equation replaced by Σ π = 1
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = gamma[i * n + j];
        }
        a[(i, i)] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| HmmError::NoStationaryDistribution("singular stationary system".into()))?;
    Ok(pi.iter().map(|&p| p.max(0.0)).collect())
}

fn irreducible(gamma: &[f64], n: usize) -> bool {
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let p = if forward { gamma[i * n + j] } else { gamma[j * n + i] };
                if p > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}
