//! Spatial adversarial attacks and Pareto adversarial training.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: a small CPU classifier backend with hand-written gradients
//!   with respect to inputs, spatial parameters and weights.
//! - [`spatial`]: sampling grids, affine and flow warps, bilinear sampling.
//! - [`attacks`]: PGD, flow, rotation-translation and integrated spatial
//!   attacks sharing one sign-gradient loop.
//! - [`pareto_qp`]: loss-moment estimation and the four-weight quadratic
//!   program that balances natural and adversarial losses.
//! - [`training`]: natural, PGD, spatial, max, average and Pareto training.
//! - [`analysis`]: robustness scores, Pareto fronts, SmoothGrad saliency,
//!   skewness and loss-landscape slices.

pub mod analysis;
pub mod attacks;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod pareto_qp;
pub mod real;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
