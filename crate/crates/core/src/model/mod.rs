//! Parameters, emission models and transition structure.

mod emission;
mod params;
mod transition;

pub use emission::{Categorical, DiagGaussian, EmissionModel, EmissionParams, NormalBernoulli, MIN_LOG_VARIANCE};
pub use params::HmmParams;
pub use transition::{
    log_softmax_masked, softmax_masked, stationary_distribution, RealizedTransitions, TransitionLogits,
    TransitionModel, BETWEEN, WITHIN,
};
