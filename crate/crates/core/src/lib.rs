//! Personalized speech enhancement toolkit.
//!
//! Three initialization schemes for a personalized denoiser are provided:
//! supervised multi-speaker pretraining, self-supervised pseudo speech
//! enhancement (PseudoSE) on a speaker's noisy recordings, and contrastive
//! mixtures (CM), which adds pairwise agreement regularizers to PseudoSE.
//! Pretrained weights are copied into a few-shot finetuning stage and
//! scored by SI-SDR improvement on unseen mixtures.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the sample type used by the command-line driver.

pub mod error;
pub mod evaluator;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pairing;
pub mod corpus;
pub mod scalar;
pub mod seed;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision clip used for training and evaluation.
pub type AudioClipF32 = signal::AudioClip<f32>;
/// Double-precision clip used by oracles and gradient checks.
pub type AudioClipF64 = signal::AudioClip<f64>;
/// Mask network in single precision.
pub type MaskNetF32 = models::MaskNet<f32>;
/// Time-domain separator in single precision.
pub type SeparatorF32 = models::Separator<f32>;
/// Model of either family in single precision.
pub type ModelF32 = models::Model<f32>;
/// Checkpoint of a single-precision model.
pub type ModelCheckpointF32 = models::ModelCheckpoint<f32>;
