//! Dual max-min training of shallow energy-based models.
//!
//! The student energy is a signed average of ridge (or periodic Gaussian)
//! features. Training moves neurons and a cloud of Langevin particles at the
//! same time; a restart probability interpolates between maximum likelihood
//! and score matching. Kernel (MMD) particle flows and a gridded 1-D solver
//! of the mean-field dynamics are included as references.
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dual;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod mmd;
pub mod model;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod pde1d;
pub mod points;
pub mod runner;
pub mod sampler;
pub mod sm;

pub use error::{Error, Result};
pub use geometry::Manifold;
pub use model::{
    Activation, DataSet, Energy, FeatureEnsemble, FeatureMap, FeatureModel, ParticleSet, TeacherModel,
    WeightInit,
};
pub use points::Points;
