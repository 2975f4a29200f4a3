//! Minimal feed-forward network stack: dense matrices, MLPs with exact
//! analytic backprop, and Adam.

mod adam;
mod matrix;
mod mlp;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{Activation, Mlp, MlpGrads, OutputActivation, Tensor};
