//! Mono PCM WAV input/output (16-bit integer or 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a mono WAV into normalized floating point.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<AudioClip<T>> {
    let reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidAudio(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| T::from_f64_lossy(v as f64)))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| T::from_f64_lossy(v as f64 / 32768.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (fmt, bits) => {
            return Err(Error::InvalidAudio(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    AudioClip::new(samples, spec.sample_rate)
}

/// Number of frames and sample rate without decoding the payload.
pub fn probe_wav(path: &Path) -> Result<(usize, u32)> {
    let reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    Ok((reader.duration() as usize, spec.sample_rate))
}

/// Writes a 32-bit float mono WAV.
pub fn write_wav<T: Scalar>(path: &Path, clip: &AudioClip<T>) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &s in clip.samples() {
        writer.write_sample(s.to_f64_lossy() as f32).map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}

/// Writes a 16-bit integer mono WAV, clipping to [-1, 1).
pub fn write_wav_i16<T: Scalar>(path: &Path, clip: &AudioClip<T>) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &s in clip.samples() {
        let v = (s.to_f64_lossy() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SAMPLE_RATE;

    #[test]
    fn float_wav_is_lossless_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.25f32, -0.5, 0.123_456_7], SAMPLE_RATE).unwrap();
        write_wav(&p, &clip).unwrap();
        assert_eq!(read_wav::<f32>(&p).unwrap(), clip);
        assert_eq!(probe_wav(&p).unwrap(), (3, SAMPLE_RATE));
    }

    #[test]
    fn int16_wav_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let clip = AudioClip::new(vec![0.5f64, -1.0, 0.0], SAMPLE_RATE).unwrap();
        write_wav_i16(&p, &clip).unwrap();
        assert_eq!(read_wav::<f64>(&p).unwrap().samples(), &[0.5, -1.0, 0.0]);
    }
}
