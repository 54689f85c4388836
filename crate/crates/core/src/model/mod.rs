//! Encoder–decoder transformer, its parameters and checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use params::{count_params, ParamCounts, ParamInfo, ParamStore, ParameterRegistry, Region};
pub use transformer::{build_model, build_registry, forward, loss_and_grads, ModelGraph, TokenBatch};
