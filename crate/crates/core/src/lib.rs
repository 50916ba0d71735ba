//! Manifold-preserving guided diffusion on linear-subspace data.
//!
//! Data live on a `k`-dimensional subspace of `R^d` with a Gaussian-mixture
//! prior, so the optimal denoiser, its Jacobian and the conjugate posterior
//! of a linear inverse problem are all available in closed form. Guided
//! samplers (DPS and the MPGD family) run against those exact quantities and
//! can be checked against them.
//!
//! ```
//! use mpgd::prelude::*;
//!
//! let manifold = LinearManifold::random(16, 3, 7).unwrap();
//! let prior = MixturePrior::random_mixture(manifold, 2, 1.0, 0.3, 1).unwrap();
//! let schedule = NoiseSchedule::linear_beta(20, 0.0).unwrap();
//! let chains = sample_unconditional(&prior, &schedule, 2, 42).unwrap();
//! let x = chains[0].terminal();
//! assert!(prior.manifold().orthogonal(&x).norm() < 1e-6);
//! ```

// `!(x >= 0.0)` rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoencoder;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod harness;
pub mod linalg;
pub mod prior;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};

/// Common imports for examples and downstream code.
pub mod prelude {
    pub use crate::autoencoder::AutoencoderPair;
    pub use crate::diagnostics::{alignment_curve, bound_audit, deviation_curve, fd_audit};
    pub use crate::error::{Error, Result};
    pub use crate::geometry::{concentration_epsilon, shell_band_test, LinearManifold, ShellSpec};
    pub use crate::guidance::{
        ActiveWindow, GuidanceLoss, GuidanceSettings, GuidedSampler, InnerOptimizer, LinearInverseLoss, LinearLoss, Method, OptimizerKind, QuadraticLoss, StepSizeMode,
        StepSizeSchedule, ZeroLoss,
    };
    pub use crate::harness::{run_experiment, ExperimentConfig};
    pub use crate::prior::{Denoiser, LatentMixture, MixturePrior};
    pub use crate::sampler::{sample_unconditional, NoiseSchedule, TrajectoryRecord};
}
