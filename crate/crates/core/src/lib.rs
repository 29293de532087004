//! Repulsive particle ensembles for diffusion-prior sampling.
//!
//! Particles follow score-based updates (Wasserstein flow, score
//! distillation, an augmented half-quadratic-splitting solver for linear
//! inverse problems) while an RBF kernel term pushes them apart so the
//! ensemble covers several modes instead of collapsing onto one.
//! Gaussian-mixture priors supply exact diffused scores, which makes every
//! sampler checkable against closed-form answers.

pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod inverse;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod priors;
pub mod schedule;

pub use ensemble::{
    ancestral_sample, GaussianState, Initialization, ParticleEnsemble, RepulsionSpace, UpdateKind,
    UpdateRule, VariationalScore,
};
pub use error::{Result, RsdError};
pub use inverse::{coupling_residual, rsd_inverse_solve, DecoderMap, ForwardOperator, InverseTask};
pub use kernels::{FeatureMap, KernelSpec};
pub use optim::Optimizer;
pub use priors::{gaussian_posterior_oracle, Covariance, GaussianMixture};
pub use schedule::{lambda_weight, DiffusionSchedule, TimeOrder, WeightingMode, WeightingSpec};
