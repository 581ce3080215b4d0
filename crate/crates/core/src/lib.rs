//! Covariate-partitioned nonstationary Gaussian-process spatial prediction
//! with Bayesian model averaging over candidate partitions.
//!
//! The pipeline: fit candidate spatial partitions from covariate locations
//! (`partition`), run per-partition MCMC under a segment-wise anisotropic
//! Matérn model (`inference`), estimate marginal likelihoods from the
//! posterior log-likelihood draws (`evidence`), combine partitions into
//! model-averaged predictive draws (`predict`), and score holdout
//! predictions with the ECDF form of the CRPS (`evaluate`). Exploratory
//! variogram diagnostics live in `variogram`; `synth` draws data from the
//! model itself; `pipeline` orchestrates the whole run.

pub mod bessel;
pub mod covariance;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod evidence;
pub mod inference;
pub mod partition;
pub mod pipeline;
pub mod predict;
pub mod rng;
pub mod synth;
pub mod variogram;

pub use error::{Error, Result};
