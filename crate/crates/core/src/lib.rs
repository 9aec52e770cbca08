//! Variance-reduced stochastic EM for hidden Markov models.
//!
//! The E step is an exact scaled forward-backward pass. The M step minimizes
//! the finite-sum surrogate `F = (1/T) Σ F_t` with SVRG or SAGA, optionally
//! refreshing one time index of the posterior per iteration (the partial E
//! step). Outer iterations accept a new parameter only if the likelihood did
//! not decrease.

pub mod bench;
pub mod data;
pub mod driver;
pub mod error;
pub mod model;
pub mod objective;
pub mod posterior;
pub mod sim;
pub mod surrogate;
pub mod vrso;

pub use data::Observations;
pub use error::{HmmError, Result};
pub use model::{
    Categorical, DiagGaussian, EmissionModel, EmissionParams, HmmParams, NormalBernoulli, TransitionLogits,
    TransitionModel,
};
pub use posterior::{e_step, log_likelihood, posterior_decode, tilde_update, EpochMeter, PosteriorCache};
pub use surrogate::{full_grad, grad_loss_t, loss_t, surrogate_value, SplitGradient, WeightSlice};
pub use driver::{
    baseline_gd, em_vrso_v1, em_vrso_v2, f_star_oracle, zeta, Budget, Fit, FitConfig, FitError, GdConfig,
    HalvingTrigger, RunTrace, TraceRow, V2Constants,
};
pub use vrso::{Algorithm, GradientStore, IndexSampler, StepSizes};
