use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClipSet, PremixtureSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{duration_to_samples, mix_at_snr, random_offset, AudioClip};

/// Shape of a batch of on-the-fly mixtures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub snr_range_db: (f64, f64),
    pub clip_sec: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            batch_size: 128,
            snr_range_db: (-5.0, 5.0),
            clip_sec: 1.0,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_range_db;
        if self.batch_size == 0 || !(lo <= hi) || !lo.is_finite() || !hi.is_finite() || !(self.clip_sec > 0.0) {
            return Err(Error::Config(format!("invalid batch specification {self:?}")));
        }
        Ok(())
    }
}

/// One input/target pair with its provenance.
#[derive(Clone, Debug)]
pub struct TrainingExample<T> {
    pub input: AudioClip<T>,
    pub target: AudioClip<T>,
    /// `input - target`, the injected noise after scaling.
    pub scaled_noise: AudioClip<T>,
    pub target_id: String,
    pub noise_id: String,
    pub snr_db: f64,
}

pub(crate) fn draw_snr<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Draws a random clip of `len` samples from a random member of `set`.
pub(crate) fn draw_segment<T: Scalar, R: Rng + ?Sized>(
    set: &ClipSet<T>,
    len: usize,
    rng: &mut R,
) -> Result<(String, AudioClip<T>)> {
    let u = &set.items()[rng.gen_range(0..set.len())];
    let (offset, len) = random_offset(u.clip.len(), len, rng)?;
    Ok((u.id.clone(), u.clip.segment(offset, len)?))
}

/// Mixes random clips of `targets` with random clips of `noises` at SNRs
/// drawn uniformly from the spec's range.
pub fn sample_mixtures<T: Scalar, R: Rng + ?Sized>(
    targets: &ClipSet<T>,
    noises: &ClipSet<T>,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<TrainingExample<T>>> {
    spec.validate()?;
    if targets.is_empty() {
        return Err(Error::EmptySet("speech set".into()));
    }
    if noises.is_empty() {
        return Err(Error::EmptySet("noise set".into()));
    }
    let len = duration_to_samples(spec.clip_sec, crate::signal::SAMPLE_RATE);
    (0..spec.batch_size)
        .map(|_| {
            let (target_id, target) = draw_segment(targets, len, rng)?;
            let (noise_id, noise) = draw_segment(noises, len, rng)?;
            let snr_db = draw_snr(spec.snr_range_db, rng);
            let mix = mix_at_snr(&target, &noise, snr_db)?;
            Ok(TrainingExample {
                input: mix.mixture,
                target,
                scaled_noise: mix.scaled_interference,
                target_id,
                noise_id,
                snr_db,
            })
        })
        .collect()
}

/// Supervised batch: clean speech targets.
pub fn sample_supervised_batch<T: Scalar, R: Rng + ?Sized>(
    speech: &ClipSet<T>,
    noise_train: &ClipSet<T>,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<TrainingExample<T>>> {
    sample_mixtures(speech, noise_train, spec, rng)
}

/// PseudoSE batch: premixed recordings are the targets.
pub fn sample_pseudose_batch<T: Scalar, R: Rng + ?Sized>(
    premixtures: &PremixtureSet<T>,
    noise_train: &ClipSet<T>,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<TrainingExample<T>>> {
    sample_mixtures(&premixtures.as_clip_set(), noise_train, spec, rng)
}
