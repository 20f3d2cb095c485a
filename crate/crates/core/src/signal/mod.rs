//! Sample-exact signal primitives: clips, SNR-controlled mixing, random
//! cropping, STFT analysis/synthesis and ratio masking.

mod stft;
pub mod wav;

use rand::Rng;

pub use stft::{apply_mask, istft, stft, RatioMask, Spectrogram, Stft, HOP_SIZE, NUM_BINS, WINDOW_SIZE};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sample rate every manifest and clip must use.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono waveform at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> AudioClip<T> {
    /// Validates that the clip is nonempty, finite and has a positive rate.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidAudio("clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!("non-finite sample at index {i}")));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    /// Builds a clip at [`SAMPLE_RATE`] from `f64` values, converting to `T`.
    pub fn from_f64(samples: &[f64]) -> Result<Self> {
        Self::new(samples.iter().map(|&v| T::from_f64_lossy(v)).collect(), SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squares, accumulated in `f64`.
    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.samples.len() as f64).sqrt()
    }

    pub fn segment(&self, offset: usize, len: usize) -> Result<Self> {
        if offset + len > self.samples.len() || len == 0 {
            return Err(Error::ClipTooShort {
                needed: offset + len,
                available: self.samples.len(),
            });
        }
        Ok(AudioClip {
            samples: self.samples[offset..offset + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn scaled(&self, gain: T) -> Self {
        AudioClip {
            samples: self.samples.iter().map(|&s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn from_parts_unchecked(samples: Vec<T>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub(crate) fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::SampleRateMismatch {
                left: self.sample_rate,
                right: other.sample_rate,
            });
        }
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn energy<T: Scalar>(x: &[T]) -> f64 {
    x.iter()
        .map(|&v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum()
}

/// Output of [`mix_at_snr`].
#[derive(Clone, Debug)]
pub struct Mixture<T> {
    pub mixture: AudioClip<T>,
    pub scaled_interference: AudioClip<T>,
    /// Gain applied to the interference.
    pub gain: T,
}

/// Gain that puts `interference` `snr_db` below `target` in RMS power.
pub fn snr_gain<T: Scalar>(target: &AudioClip<T>, interference: &AudioClip<T>, snr_db: f64) -> Result<T> {
    let et = target.energy();
    let en = interference.energy();
    if et <= 0.0 {
        return Err(Error::ZeroEnergy { what: "target" });
    }
    if en <= 0.0 {
        return Err(Error::ZeroEnergy {
            what: "interference",
        });
    }
    let rms_t = (et / target.len() as f64).sqrt();
    let rms_n = (en / interference.len() as f64).sqrt();
    Ok(T::from_f64_lossy(rms_t / (rms_n * 10f64.powf(snr_db / 20.0))))
}

/// `mixture = target + gain * interference` with the gain chosen so the RMS
/// ratio of target to scaled interference is `snr_db`. An `snr_db` of
/// `+inf` yields a zero gain.
pub fn mix_at_snr<T: Scalar>(
    target: &AudioClip<T>,
    interference: &AudioClip<T>,
    snr_db: f64,
) -> Result<Mixture<T>> {
    target.check_compatible(interference)?;
    let gain = snr_gain(target, interference, snr_db)?;
    let scaled = interference.scaled(gain);
    Ok(add_scaled(target, scaled, gain))
}

/// Adds an already scaled interference realization to `target`.
pub(crate) fn add_scaled<T: Scalar>(target: &AudioClip<T>, scaled: AudioClip<T>, gain: T) -> Mixture<T> {
    let mixture = target
        .samples
        .iter()
        .zip(&scaled.samples)
        .map(|(&s, &n)| s + n)
        .collect();
    Mixture {
        mixture: AudioClip::from_parts_unchecked(mixture, target.sample_rate),
        scaled_interference: scaled,
        gain,
    }
}

/// Measured SNR in dB between a target and an interference realization.
pub fn measured_snr_db<T: Scalar>(target: &AudioClip<T>, interference: &AudioClip<T>) -> f64 {
    10.0 * (target.energy() / interference.energy()).log10()
}

/// Number of samples `duration_sec` spans at `sample_rate`.
pub fn duration_to_samples(duration_sec: f64, sample_rate: u32) -> usize {
    (duration_sec * sample_rate as f64).round() as usize
}

/// Draws a uniformly offset contiguous segment of `duration_sec`.
pub fn random_clip<T: Scalar, R: Rng + ?Sized>(
    source: &AudioClip<T>,
    duration_sec: f64,
    rng: &mut R,
) -> Result<AudioClip<T>> {
    let (offset, len) = random_offset(source.len(), duration_to_samples(duration_sec, source.sample_rate), rng)?;
    source.segment(offset, len)
}

pub(crate) fn random_offset<R: Rng + ?Sized>(
    available: usize,
    needed: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if needed == 0 || needed > available {
        return Err(Error::ClipTooShort { needed, available });
    }
    Ok((rng.gen_range(0..=available - needed), needed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn clip(v: &[f64]) -> AudioClip<f64> {
        AudioClip::from_f64(v).unwrap()
    }

    #[test]
    fn rejects_empty_and_nonfinite() {
        assert!(AudioClip::<f32>::new(vec![], SAMPLE_RATE).is_err());
        assert!(AudioClip::new(vec![0.0f32, f32::NAN], SAMPLE_RATE).is_err());
        assert!(AudioClip::new(vec![0.0f32], 0).is_err());
    }

    #[test]
    fn equal_power_at_zero_db_is_plain_sum() {
        let t = clip(&[1.0, -1.0, 1.0, -1.0]);
        let n = clip(&[1.0, 1.0, -1.0, -1.0]);
        let m = mix_at_snr(&t, &n, 0.0).unwrap();
        assert_eq!(m.gain, 1.0);
        assert_eq!(m.mixture.samples(), &[2.0, 0.0, 0.0, -2.0]);
    }

    #[test]
    fn twenty_db_example() {
        let t = clip(&[1.0, 1.0, 1.0, 1.0]);
        let n = clip(&[1.0, -1.0, 1.0, -1.0]);
        let m = mix_at_snr(&t, &n, 20.0).unwrap();
        assert!((m.gain - 0.1).abs() < 1e-15);
        for (got, want) in m.mixture.samples().iter().zip([1.1, 0.9, 1.1, 0.9]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_sinusoids_measure_exact_snr() {
        let n = 1600;
        let s: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / n as f64).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 23.0 * i as f64 / n as f64).cos()).collect();
        let (s, v) = (clip(&s), clip(&v));
        for snr in [-5.0, 0.0, 3.3, 10.0] {
            let m = mix_at_snr(&s, &v, snr).unwrap();
            // With orthogonal signals the scale-invariant projection of the
            // mixture onto the target recovers the target exactly.
            let sdr = crate::metrics::si_sdr(&s, &m.mixture).unwrap();
            assert!((sdr.value_db - snr).abs() < 1e-6, "{} vs {snr}", sdr.value_db);
        }
    }

    #[test]
    fn zero_energy_is_rejected() {
        let t = clip(&[0.0, 0.0]);
        let n = clip(&[1.0, 0.5]);
        assert!(matches!(mix_at_snr(&t, &n, 0.0), Err(Error::ZeroEnergy { what: "target" })));
        assert!(matches!(mix_at_snr(&n, &t, 0.0), Err(Error::ZeroEnergy { what: "interference" })));
    }

    #[test]
    fn infinite_snr_leaves_target_untouched() {
        let t = clip(&[0.3, -0.2, 0.1]);
        let n = clip(&[1.0, 0.5, -0.5]);
        let m = mix_at_snr(&t, &n, f64::INFINITY).unwrap();
        assert_eq!(m.mixture, t);
    }

    #[test]
    fn random_clip_whole_source() {
        let src = AudioClip::new(vec![0.5f32; SAMPLE_RATE as usize], SAMPLE_RATE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_clip(&src, 1.0, &mut rng).unwrap(), src);
        assert!(matches!(random_clip(&src, 1.5, &mut rng), Err(Error::ClipTooShort { .. })));
    }

    #[test]
    fn random_clip_deterministic_under_seed() {
        let src = AudioClip::new((0..32_000).map(|i| i as f32).collect(), SAMPLE_RATE).unwrap();
        let a = random_clip(&src, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_clip(&src, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16_000);
    }

    #[test]
    fn random_offsets_are_uniform() {
        // 2 s source, 1 s clip: 16001 valid offsets, binned into 20 cells.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let bins = 20usize;
        let valid = 16_001usize;
        let mut counts = vec![0usize; bins];
        let draws = 10_000;
        for _ in 0..draws {
            let (off, _) = random_offset(32_000, 16_000, &mut rng).unwrap();
            counts[off * bins / valid] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(chi2 < critical, "chi2 = {chi2}, critical = {critical}");
    }
}
