//! Domain-specific sub-networks for a small encoder–decoder transformer.
//!
//! Each domain gets a binary mask over the model's weights, found by a short
//! finetune followed by magnitude pruning. A single parameter store is then
//! trained so that each single-domain mini-batch only moves the weights its
//! domain's mask selects. At inference time a domain sees its masked weights
//! from the trained store and base weights everywhere else.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod mask;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
