//! Enhancement models and portable checkpoints.
//!
//! Two families share the [`Model`] interface: a recurrent ratio-mask
//! estimator working on STFT magnitudes and a time-domain convolutional
//! separator. Both expose a caching forward pass and a backward pass that
//! accumulates parameter gradients, which is all the trainer needs.

mod checkpoint;
mod masknet;
mod separator;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, Provenance};
pub use masknet::{masknet_forward, MaskNet, MaskNetCache, MaskNetConfig};
pub use separator::{separator_forward, Separator, SeparatorCache, SeparatorConfig};

use crate::error::Result;
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::signal::AudioClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    MaskNet(MaskNetConfig),
    Separator(SeparatorConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::MaskNet(c) => c.validate(),
            ModelConfig::Separator(c) => c.validate(),
        }
    }

    /// Short label used in reports, e.g. `gru-64` or `convtasnet`.
    pub fn label(&self) -> String {
        match self {
            ModelConfig::MaskNet(c) => format!("gru-{}", c.hidden_size),
            ModelConfig::Separator(_) => "convtasnet".to_string(),
        }
    }

    /// Default learning rate for the family.
    pub fn default_learning_rate(&self) -> f64 {
        match self {
            ModelConfig::MaskNet(_) => 1e-3,
            ModelConfig::Separator(_) => 1e-4,
        }
    }

    /// Default number of mixtures per batch.
    pub fn default_batch_size(&self) -> usize {
        match self {
            ModelConfig::MaskNet(_) => 128,
            ModelConfig::Separator(_) => 8,
        }
    }
}

/// Exact number of trainable scalars.
pub fn param_count(config: &ModelConfig) -> usize {
    match config {
        ModelConfig::MaskNet(c) => c.param_count(),
        ModelConfig::Separator(c) => c.param_count(),
    }
}

#[derive(Clone)]
pub enum Model<T: Scalar> {
    MaskNet(MaskNet<T>),
    Separator(Separator<T>),
}

pub enum ForwardCache<T> {
    MaskNet(MaskNetCache<T>),
    Separator(SeparatorCache<T>),
}

impl<T: Scalar> Model<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Ok(match config {
            ModelConfig::MaskNet(c) => Model::MaskNet(MaskNet::zeros(*c)?),
            ModelConfig::Separator(c) => Model::Separator(Separator::zeros(*c)?),
        })
    }

    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::MaskNet(c) => Model::MaskNet(MaskNet::random(*c, seed)?),
            ModelConfig::Separator(c) => Model::Separator(Separator::random(*c, seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::MaskNet(m) => ModelConfig::MaskNet(*m.config()),
            Model::Separator(m) => ModelConfig::Separator(*m.config()),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        match self {
            Model::MaskNet(m) => m.params(),
            Model::Separator(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            Model::MaskNet(m) => m.params_mut(),
            Model::Separator(m) => m.params_mut(),
        }
    }

    /// Shortest accepted input in samples.
    pub fn min_len(&self) -> usize {
        match self {
            Model::MaskNet(m) => m.min_len(),
            Model::Separator(m) => m.min_len(),
        }
    }

    pub fn forward_train(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        Ok(match self {
            Model::MaskNet(m) => {
                let (y, c) = m.forward_train(x)?;
                (y, ForwardCache::MaskNet(c))
            }
            Model::Separator(m) => {
                let (y, c) = m.forward_train(x)?;
                (y, ForwardCache::Separator(c))
            }
        })
    }

    /// Accumulates parameter gradients for output gradient `dy`.
    ///
    /// Panics if `cache` came from the other model family.
    pub fn backward(&self, cache: &ForwardCache<T>, dy: &[T], grads: &mut ParamSet<T>) {
        match (self, cache) {
            (Model::MaskNet(m), ForwardCache::MaskNet(c)) => m.backward(c, dy, grads),
            (Model::Separator(m), ForwardCache::Separator(c)) => m.backward(c, dy, grads),
            _ => panic!("forward cache does not belong to this model"),
        }
    }

    /// Enhanced waveform with the input's length.
    pub fn enhance(&self, mixture: &AudioClip<T>) -> Result<AudioClip<T>> {
        let (y, _) = self.forward_train(mixture.samples())?;
        AudioClip::new(y, mixture.sample_rate())
    }
}
