//! Minimal neural-network toolkit: named parameter sets, layers with
//! hand-written backward passes and the Adam optimizer.

mod layers;
mod params;

pub use layers::*;
pub use params::{clip_global_norm, Adam, ParamSet, Tensor};
