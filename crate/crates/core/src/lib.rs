//! Multi-channel sparse blind deconvolution.
//!
//! Given `p` observations `y_i = g ⊛ x_i` of an unknown filter `g` circularly
//! convolved with unknown sparse inputs `x_i`, recover the inverse filter
//! `g_inv` (up to shift and sign) by minimizing a smooth sparsity surrogate
//! of `C(y_i) R h` over the unit sphere with manifold gradient descent from
//! random starts.
//!
//! Modules, bottom-up:
//! - [`circulant`]: FFT-backed circulant algebra (1D and 2D).
//! - [`signal_model`]: seeded synthetic filters, sparse inputs, observations.
//! - [`surrogate_loss`]: log-cosh loss, gradients, preconditioner, ℓ4 baseline.
//! - [`sphere`]: tangent projection, retraction, basins, local chart.
//! - [`solver`]: manifold gradient descent with restarts.
//! - [`metrics`]: shift/sign-aware distances and the success test.
//! - [`landscape`]: empirical checks of the local geometry.
//! - [`imaging`]: 2D blind deconvolution of image channels.
//! - [`harness`]: Monte Carlo success-rate grids and their CSV output.

pub mod circulant;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod landscape;
pub mod metrics;
pub mod numfmt;
pub mod signal_model;
pub mod solver;
pub mod sphere;
pub mod surrogate_loss;

pub use circulant::{Filter, Shape};
pub use error::{MsbdError, Result};
pub use signal_model::ObservationSet;
pub use solver::{RecoveryResult, SolverConfig};
pub use sphere::SphereVector;
