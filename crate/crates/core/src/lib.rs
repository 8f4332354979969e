//! Multi-output Gaussian processes over aggregated observations.
//!
//! Attributes observed as averages (or sums) over heterogeneous supports in
//! one or more domains are modelled as linear mixtures of shared latent
//! squared-exponential processes. Mixing weights carry a prior shared across
//! domains and a factorized Gaussian variational posterior; training
//! maximizes a Monte-Carlo ELBO with Adam, and predictions come from a
//! Monte-Carlo mixture of closed-form Gaussian posteriors.

pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod model;
pub mod prediction;
pub mod rng;

pub use error::{Error, Result};
