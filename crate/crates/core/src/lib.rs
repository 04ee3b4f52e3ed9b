//! Poisson midpoint discretization of Langevin dynamics and diffusion
//! reverse processes.
//!
//! * [`dynamics`]: the generic linear-Gaussian step `X' = A X + G b(X) + Γ Z`
//!   and its exact scaling relations.
//! * [`langevin`]: overdamped and underdamped families, the Poisson midpoint
//!   kernel, randomized midpoint baseline and trajectory diagnostics.
//! * [`diffusion`]: DDPM schedules and variants, the midpoint scheduler and
//!   an analytic Gaussian-mixture score.
//! * [`metrics`]: Gaussian distances, empirical estimators, two-sample test.
//! * [`bench`]: named scenarios with embedded pass/fail thresholds.

pub mod bench;
pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod langevin;
pub mod matrix;
pub mod metrics;
pub mod rng;

pub use error::{Error, Result};
pub use rng::RngStream;
