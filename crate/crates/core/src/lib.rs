//! Context-conditioned dynamics learning for model-based reinforcement learning.
//!
//! The crate learns a low-dimensional context vector from short transition
//! segments and feeds it to a next-state predictor so that one model can
//! serve a whole family of environments whose physical parameters differ.
//! Context vectors are shaped by a pairwise relational head, and pairs from
//! different trajectories are softly merged according to how similar their
//! controlled direct effect on the predicted next state is.
//!
//! Everything here is pure computation over `alloc`; file formats, the CLI
//! and run directories live in the `ria` companion crate.
//!
//! Module map:
//!
//! - [`nn`]: dense matrices, MLPs with exact backprop, Adam.
//! - [`env`]: pendulum and spring-mass families, rollouts, trajectories.
//! - [`segment`]: transition segments and the context encoder.
//! - [`dynamics`]: normalizer and the context-conditioned prediction head.
//! - [`relation`]: pair scoring and the two relation losses.
//! - [`intervention`]: controlled direct effects, similarity weights, `L^dist`.
//! - [`planner`]: cross-entropy-method MPC over the learned model.
//! - [`trainer`]: replay buffer, joint loss, training loop.
//! - [`eval`]: returns, prediction error, cluster metrics, PCA.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
pub(crate) mod math;

pub mod dynamics;
pub mod env;
pub mod eval;
pub mod intervention;
pub mod model;
pub mod nn;
pub mod planner;
pub mod relation;
pub mod segment;
pub mod trainer;

pub use error::{Error, Result};
pub(crate) use error::config_err;

/// Deterministic RNG used everywhere a seed is accepted.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}

/// Dimension of every context vector.
pub const CONTEXT_DIM: usize = 10;
