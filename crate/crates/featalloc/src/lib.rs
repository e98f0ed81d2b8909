//! Feature allocation priors and posterior inference for latent feature
//! models.
//!
//! The crate implements two priors over binary feature-allocation matrices:
//! the exchangeable Indian buffet process (IBP) and the attraction Indian
//! buffet distribution (AIBD), which weights feature sharing by pairwise
//! similarity while preserving the IBP's Poisson feature-count law. On top
//! of the priors sit the collapsed linear Gaussian latent feature model
//! likelihood and a Metropolis-Hastings-within-Gibbs sampler for the joint
//! posterior of (Z, alpha, tau, rho, sigma_X, sigma_A).
//!
//! The `featalloc` binary exposes the batch workflows: prior simulation,
//! pmf evaluation, posterior fitting, and chain diagnostics.

pub mod allocation;
pub mod diagnostics;
pub mod error;
pub mod lglfm;
pub mod perm;
pub mod priors;
pub mod mcmc;
pub mod similarity;
#[doc(hidden)]
pub mod testing;

pub use allocation::{AllocationKey, AllocationStats, FeatureAllocation};
pub use error::{Error, Result};
pub use lglfm::{LikelihoodCache, NoiseScales};
pub use perm::Permutation;
pub use priors::{AibdParams, IbpParams, Mass};
pub use similarity::{DecayFunction, DistanceMatrix, SimilarityMatrix};
