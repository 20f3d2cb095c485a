use std::sync::Arc;

use num_traits::Zero;
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::AudioClip;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const WINDOW_SIZE: usize = 1024;
pub const HOP_SIZE: usize = WINDOW_SIZE / 4;
pub const NUM_BINS: usize = WINDOW_SIZE / 2 + 1;

/// Complex short-time spectrum, row-major `[num_frames x num_bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T> {
    pub frames: Vec<Complex<T>>,
    pub num_frames: usize,
    pub window_size: usize,
    pub hop: usize,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        let nb = self.num_bins();
        &self.frames[t * nb..(t + 1) * nb]
    }

    /// Magnitudes in the same layout as the frames.
    pub fn magnitude(&self) -> Vec<T> {
        self.frames.iter().map(|c| c.norm()).collect()
    }
}

/// Real mask with one gain per time-frequency cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioMask<T> {
    pub values: Vec<T>,
    pub num_frames: usize,
    pub num_bins: usize,
}

impl<T: Scalar> RatioMask<T> {
    pub fn constant(num_frames: usize, num_bins: usize, value: T) -> Self {
        RatioMask {
            values: vec![value; num_frames * num_bins],
            num_frames,
            num_bins,
        }
    }
}

/// Element-wise product of a real mask with a complex spectrogram.
pub fn apply_mask<T: Scalar>(spec: &Spectrogram<T>, mask: &RatioMask<T>) -> Result<Spectrogram<T>> {
    if mask.num_frames != spec.num_frames
        || mask.num_bins != spec.num_bins()
        || mask.values.len() != spec.frames.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs spectrogram {}x{}",
            mask.num_frames,
            mask.num_bins,
            spec.num_frames,
            spec.num_bins()
        )));
    }
    Ok(Spectrogram {
        frames: spec.frames.iter().zip(&mask.values).map(|(c, &m)| c.scale(m)).collect(),
        num_frames: spec.num_frames,
        window_size: spec.window_size,
        hop: spec.hop,
    })
}

/// Hann-windowed STFT with 75% overlap and weighted overlap-add synthesis.
///
/// The signal is zero-padded by half a window on the left and enough on the
/// right that every sample is covered by the full set of overlapping frames.
/// Synthesis divides by the summed squared window, so `istft(stft(x)) == x`
/// up to floating-point round-off over the whole clip.
pub struct Stft<T: Scalar> {
    window_size: usize,
    hop: usize,
    window: Vec<T>,
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
}

impl<T: Scalar> Stft<T> {
    pub fn new(window_size: usize) -> Self {
        assert!(window_size >= 4 && window_size % 4 == 0, "window must be a positive multiple of 4");
        let mut planner = RealFftPlanner::<T>::new();
        let two_pi = 2.0 * std::f64::consts::PI;
        // Periodic Hann: squared window sums to a constant at hop = N/4.
        let window = (0..window_size)
            .map(|n| T::from_f64_lossy(0.5 - 0.5 * (two_pi * n as f64 / window_size as f64).cos()))
            .collect();
        Stft {
            window_size,
            hop: window_size / 4,
            window,
            forward: planner.plan_fft_forward(window_size),
            inverse: planner.plan_fft_inverse(window_size),
        }
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop) + 1
    }

    fn pad_left(&self) -> usize {
        self.window_size / 2
    }

    fn padded_len(&self, len: usize) -> usize {
        (self.num_frames(len) - 1) * self.hop + self.window_size
    }

    pub fn stft(&self, clip: &AudioClip<T>) -> Result<Spectrogram<T>> {
        self.analyze(clip.samples())
    }

    /// STFT of raw samples; requires at least one full window of input.
    pub fn analyze(&self, x: &[T]) -> Result<Spectrogram<T>> {
        if x.len() < self.window_size {
            return Err(Error::ClipTooShort {
                needed: self.window_size,
                available: x.len(),
            });
        }
        let num_frames = self.num_frames(x.len());
        let nb = self.num_bins();
        let mut padded = vec![T::zero(); self.padded_len(x.len())];
        padded[self.pad_left()..self.pad_left() + x.len()].copy_from_slice(x);

        let mut frames = vec![Complex::zero(); num_frames * nb];
        let mut buf = self.forward.make_input_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for t in 0..num_frames {
            let seg = &padded[t * self.hop..t * self.hop + self.window_size];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = s * w;
            }
            self.forward
                .process_with_scratch(&mut buf, &mut frames[t * nb..(t + 1) * nb], &mut scratch)
                .expect("buffer sizes come from the plan");
        }
        Ok(Spectrogram {
            frames,
            num_frames,
            window_size: self.window_size,
            hop: self.hop,
        })
    }

    fn check_spec(&self, spec: &Spectrogram<T>) -> Result<()> {
        if spec.window_size != self.window_size
            || spec.hop != self.hop
            || spec.frames.len() != spec.num_frames * self.num_bins()
            || spec.num_frames < 1
        {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram (window {}, hop {}, {} cells for {} frames) does not fit STFT window {}",
                spec.window_size,
                spec.hop,
                spec.frames.len(),
                spec.num_frames,
                self.window_size
            )));
        }
        Ok(())
    }

    /// Squared-window sum at each padded sample position.
    fn window_power(&self, num_frames: usize) -> Vec<T> {
        let mut acc = vec![T::zero(); (num_frames - 1) * self.hop + self.window_size];
        for t in 0..num_frames {
            for (a, &w) in acc[t * self.hop..].iter_mut().zip(&self.window) {
                *a = *a + w * w;
            }
        }
        acc
    }

    /// Overlap-add synthesis trimmed or zero-extended to `length` samples.
    pub fn synthesize(&self, spec: &Spectrogram<T>, length: usize) -> Result<Vec<T>> {
        self.check_spec(spec)?;
        let nb = self.num_bins();
        let norm = T::one() / T::from_usize_lossy(self.window_size);
        let power = self.window_power(spec.num_frames);
        let mut acc = vec![T::zero(); power.len()];
        let mut bins = self.inverse.make_input_vec();
        let mut out = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        for t in 0..spec.num_frames {
            bins.copy_from_slice(&spec.frames[t * nb..(t + 1) * nb]);
            // DC and Nyquist of a real signal are real.
            bins[0].im = T::zero();
            bins[nb - 1].im = T::zero();
            self.inverse
                .process_with_scratch(&mut bins, &mut out, &mut scratch)
                .expect("buffer sizes come from the plan");
            for ((a, &o), &w) in acc[t * self.hop..].iter_mut().zip(&out).zip(&self.window) {
                *a = *a + o * norm * w;
            }
        }
        let eps = T::from_f64_lossy(1e-10);
        let mut y = vec![T::zero(); length];
        for (i, v) in y.iter_mut().enumerate() {
            let p = i + self.pad_left();
            if p < acc.len() && power[p] > eps {
                *v = acc[p] / power[p];
            }
        }
        Ok(y)
    }

    pub fn istft(&self, spec: &Spectrogram<T>, length: usize) -> Result<AudioClip<T>> {
        let y = self.synthesize(spec, length)?;
        AudioClip::new(y, super::SAMPLE_RATE)
    }

    /// Adjoint of [`Stft::synthesize`]: maps a gradient on the output samples
    /// to gradients on the real and imaginary parts of every spectrogram
    /// cell, packed as `Complex { re: dL/dRe, im: dL/dIm }`.
    pub fn synthesize_grad(&self, grad: &[T], num_frames: usize) -> Spectrogram<T> {
        let nb = self.num_bins();
        let power = self.window_power(num_frames);
        let mut g = vec![T::zero(); power.len()];
        let eps = T::from_f64_lossy(1e-10);
        for (i, &d) in grad.iter().enumerate() {
            let p = i + self.pad_left();
            if p < g.len() && power[p] > eps {
                g[p] = d / power[p];
            }
        }
        let n = T::from_usize_lossy(self.window_size);
        let two = T::one() + T::one();
        let mut frames = vec![Complex::zero(); num_frames * nb];
        let mut buf = self.forward.make_input_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for t in 0..num_frames {
            let seg = &g[t * self.hop..t * self.hop + self.window_size];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = s * w;
            }
            let out = &mut frames[t * nb..(t + 1) * nb];
            self.forward
                .process_with_scratch(&mut buf, out, &mut scratch)
                .expect("buffer sizes come from the plan");
            for (k, c) in out.iter_mut().enumerate() {
                let weight = if k == 0 || k == nb - 1 { T::one() } else { two };
                c.re = c.re * weight / n;
                c.im = c.im * weight / n;
            }
            out[0].im = T::zero();
            out[nb - 1].im = T::zero();
        }
        Spectrogram {
            frames,
            num_frames,
            window_size: self.window_size,
            hop: self.hop,
        }
    }
}

/// STFT with the standard 1024-sample window.
pub fn stft<T: Scalar>(clip: &AudioClip<T>) -> Result<Spectrogram<T>> {
    Stft::new(WINDOW_SIZE).stft(clip)
}

/// Inverse of [`stft`] with output `length`.
pub fn istft<T: Scalar>(spec: &Spectrogram<T>, length: usize) -> Result<AudioClip<T>> {
    Stft::new(spec.window_size).istft(spec, length)
}
