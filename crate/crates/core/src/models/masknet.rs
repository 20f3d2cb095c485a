use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gru_backward, gru_forward, linear, linear_backward, sigmoid, GruCache, GruGrads, GruWeights, ParamSet, Tensor};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::signal::{apply_mask, RatioMask, Spectrogram, Stft, NUM_BINS};
use crate::signal::AudioClip;

/// Recurrent ratio-mask estimator on magnitude spectra.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskNetConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_bins: usize,
}

impl MaskNetConfig {
    /// Two-layer GRU with `hidden_size` units over the standard 513 bins.
    pub fn gru(hidden_size: usize) -> Self {
        MaskNetConfig {
            hidden_size,
            num_layers: 2,
            num_bins: NUM_BINS,
        }
    }

    pub fn window_size(&self) -> usize {
        2 * (self.num_bins - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_layers == 0 || self.num_bins < 3 || self.window_size() % 4 != 0 {
            return Err(Error::Config(format!("invalid mask network {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (h, f) = (self.hidden_size, self.num_bins);
        let first = 3 * h * (f + h) + 6 * h;
        let rest = (self.num_layers - 1) * (3 * h * (h + h) + 6 * h);
        first + rest + h * f + f
    }
}

#[derive(Clone, Copy, Debug)]
struct GruIdx {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
}

pub struct MaskNet<T: Scalar> {
    config: MaskNetConfig,
    params: ParamSet<T>,
    layers: Vec<GruIdx>,
    dense_w: usize,
    dense_b: usize,
    stft: Stft<T>,
}

impl<T: Scalar> Clone for MaskNet<T> {
    fn clone(&self) -> Self {
        MaskNet {
            config: self.config,
            params: self.params.clone(),
            layers: self.layers.clone(),
            dense_w: self.dense_w,
            dense_b: self.dense_b,
            stft: Stft::new(self.config.window_size()),
        }
    }
}

pub struct MaskNetCache<T> {
    spec: Spectrogram<T>,
    /// Inputs to each GRU layer, the first being the magnitudes.
    layer_inputs: Vec<Vec<T>>,
    gru: Vec<GruCache<T>>,
    top: Vec<T>,
    mask: Vec<T>,
}

impl<T: Scalar> MaskNet<T> {
    /// All weights zero: the mask is 0.5 everywhere.
    pub fn zeros(config: MaskNetConfig) -> Result<Self> {
        config.validate()?;
        let (h, f) = (config.hidden_size, config.num_bins);
        let mut params = ParamSet::default();
        let mut layers = Vec::new();
        for l in 0..config.num_layers {
            let input = if l == 0 { f } else { h };
            layers.push(GruIdx {
                w_ih: params.push(format!("gru.{l}.weight_ih"), Tensor::zeros(&[3 * h, input])),
                w_hh: params.push(format!("gru.{l}.weight_hh"), Tensor::zeros(&[3 * h, h])),
                b_ih: params.push(format!("gru.{l}.bias_ih"), Tensor::zeros(&[3 * h])),
                b_hh: params.push(format!("gru.{l}.bias_hh"), Tensor::zeros(&[3 * h])),
            });
        }
        let dense_w = params.push("dense.weight", Tensor::zeros(&[f, h]));
        let dense_b = params.push("dense.bias", Tensor::zeros(&[f]));
        Ok(MaskNet {
            config,
            params,
            layers,
            dense_w,
            dense_b,
            stft: Stft::new(config.window_size()),
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from `seed`.
    pub fn random(config: MaskNetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = rng_for(seed, &[]);
        let bound = 1.0 / (config.hidden_size as f64).sqrt();
        for t in net.params.tensors_mut() {
            *t = Tensor::uniform(&t.shape, bound, &mut rng);
        }
        Ok(net)
    }

    pub fn config(&self) -> &MaskNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn min_len(&self) -> usize {
        self.config.window_size()
    }

    fn gru_weights(&self, idx: GruIdx) -> GruWeights<'_, T> {
        GruWeights {
            w_ih: self.params.data(idx.w_ih),
            w_hh: self.params.data(idx.w_hh),
            b_ih: self.params.data(idx.b_ih),
            b_hh: self.params.data(idx.b_hh),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.min_len() {
            return Err(Error::ClipTooShort {
                needed: self.min_len(),
                available: len,
            });
        }
        Ok(())
    }

    pub fn forward_train(&self, x: &[T]) -> Result<(Vec<T>, MaskNetCache<T>)> {
        self.check_len(x.len())?;
        let spec = self.stft.analyze(x)?;
        let frames = spec.num_frames;
        let (h, f) = (self.config.hidden_size, self.config.num_bins);
        let mut layer_inputs = vec![spec.magnitude()];
        let mut gru = Vec::with_capacity(self.layers.len());
        for (l, &idx) in self.layers.iter().enumerate() {
            let in_dim = if l == 0 { f } else { h };
            let (out, cache) = gru_forward(&layer_inputs[l], frames, in_dim, h, &self.gru_weights(idx));
            gru.push(cache);
            layer_inputs.push(out);
        }
        let top = layer_inputs.pop().expect("at least one layer");
        let mut mask = linear(&top, frames, h, self.params.data(self.dense_w), Some(self.params.data(self.dense_b)), f);
        mask.iter_mut().for_each(|v| *v = sigmoid(*v));
        let ratio = RatioMask {
            values: mask,
            num_frames: frames,
            num_bins: f,
        };
        let y = self.stft.synthesize(&apply_mask(&spec, &ratio)?, x.len())?;
        Ok((
            y,
            MaskNetCache {
                spec,
                layer_inputs,
                gru,
                top,
                mask: ratio.values,
            },
        ))
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/dy`.
    pub fn backward(&self, cache: &MaskNetCache<T>, dy: &[T], grads: &mut ParamSet<T>) {
        let frames = cache.spec.num_frames;
        let (h, f) = (self.config.hidden_size, self.config.num_bins);
        let g = self.stft.synthesize_grad(dy, frames);
        let dlogit: Vec<T> = g
            .frames
            .iter()
            .zip(&cache.spec.frames)
            .zip(&cache.mask)
            .map(|((gc, xc), &m)| (gc.re * xc.re + gc.im * xc.im) * m * (T::one() - m))
            .collect();
        let mut dh = vec![T::zero(); frames * h];
        {
            let [dw, db] = grads.many_mut([self.dense_w, self.dense_b]);
            linear_backward(&cache.top, frames, h, self.params.data(self.dense_w), f, &dlogit, dw, Some(db), Some(&mut dh));
        }
        for l in (0..self.layers.len()).rev() {
            let idx = self.layers[l];
            let in_dim = if l == 0 { f } else { h };
            let [w_ih, w_hh, b_ih, b_hh] = grads.many_mut([idx.w_ih, idx.w_hh, idx.b_ih, idx.b_hh]);
            dh = gru_backward(
                &cache.layer_inputs[l],
                in_dim,
                &self.gru_weights(idx),
                &cache.gru[l],
                &dh,
                GruGrads { w_ih, w_hh, b_ih, b_hh },
            );
        }
    }

    /// Enhanced clip and the estimated mask.
    pub fn forward(&self, mixture: &AudioClip<T>) -> Result<(AudioClip<T>, RatioMask<T>)> {
        let (y, cache) = self.forward_train(mixture.samples())?;
        let mask = RatioMask {
            values: cache.mask,
            num_frames: cache.spec.num_frames,
            num_bins: self.config.num_bins,
        };
        Ok((AudioClip::new(y, mixture.sample_rate())?, mask))
    }
}

/// Runs the mask network on `mixture`.
pub fn masknet_forward<T: Scalar>(net: &MaskNet<T>, mixture: &AudioClip<T>) -> Result<(AudioClip<T>, RatioMask<T>)> {
    net.forward(mixture)
}
