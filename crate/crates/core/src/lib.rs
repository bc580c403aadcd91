//! Shared amortized variational inference for few-shot learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small define-by-run reverse-mode AD engine.
//! - [`gaussian`]: diagonal-Gaussian densities, closed-form KL and
//!   reparameterized sampling.
//! - [`sandbox`]: the conjugate Gaussian task family where the exact
//!   marginal likelihood, Monte-Carlo and variational objectives can be
//!   compared against the true posterior.
//! - [`blobs`]: a separable synthetic few-shot dataset and episode sampler.
//! - [`fewshot`]: stochastic latent classifiers with a shared inference
//!   network, trained with a β-weighted ELBO or a Monte-Carlo likelihood.

pub mod autodiff;
pub mod blobs;
pub mod fewshot;
mod error;
pub mod gaussian;
pub mod rng;
pub mod sandbox;

pub use error::{Error, Result};
