//! Desk-scale synthetic corpus.
//!
//! A "speaker" is a harmonic tone complex: a speaker-specific fundamental
//! with slow vibrato and declination, a small inventory of formant-shaped
//! spectral envelopes ("vowels") switched per syllable, and a syllabic
//! amplitude envelope with pauses. Noises are band-filtered white noise with
//! a stationary bed plus random bursts.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusManifest, CorpusTag, ManifestEntry};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::signal::wav::write_wav;
use crate::signal::{AudioClip, SAMPLE_RATE};

const TARGET_RMS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub test_speakers: usize,
    pub test_speaker_sec: f64,
    pub general_speakers: usize,
    pub general_speaker_sec: f64,
    /// (count, seconds each)
    pub noise_train: (usize, f64),
    pub noise_test: (usize, f64),
    pub noise_premix: (usize, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            test_speakers: 3,
            test_speaker_sec: 60.0,
            general_speakers: 6,
            general_speaker_sec: 20.0,
            noise_train: (6, 8.0),
            noise_test: (3, 8.0),
            noise_premix: (3, 12.0),
        }
    }
}

/// Speaker ids the generator assigns to test speakers.
pub fn test_speaker_ids(spec: &SyntheticSpec) -> Vec<String> {
    (0..spec.test_speakers).map(|i| format!("spk-t{i}")).collect()
}

struct Voice {
    f0: f64,
    vowels: Vec<[(f64, f64); 3]>,
    syllable_sec: (f64, f64),
    tilt: f64,
}

impl Voice {
    fn random(rng: &mut ChaCha8Rng, f0: f64) -> Self {
        let vowels = (0..4)
            .map(|_| {
                [
                    (rng.gen_range(300.0..900.0), rng.gen_range(80.0..200.0)),
                    (rng.gen_range(900.0..2300.0), rng.gen_range(100.0..300.0)),
                    (rng.gen_range(2300.0..3600.0), rng.gen_range(150.0..400.0)),
                ]
            })
            .collect();
        let base = rng.gen_range(0.12..0.22);
        Voice {
            f0,
            vowels,
            syllable_sec: (base * 0.7, base * 1.4),
            tilt: rng.gen_range(0.6..1.2),
        }
    }

    fn harmonic_gains(&self, f0: f64, vowel: usize) -> Vec<f64> {
        let nyq = 0.45 * SAMPLE_RATE as f64;
        let count = ((nyq.min(5000.0)) / f0).floor() as usize;
        (1..=count)
            .map(|h| {
                let f = h as f64 * f0;
                let env: f64 = self.vowels[vowel]
                    .iter()
                    .map(|&(c, bw)| (-0.5 * ((f - c) / bw).powi(2)).exp())
                    .sum();
                (env + 0.05) * (h as f64).powf(-self.tilt)
            })
            .collect()
    }

    fn utterance(&self, secs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sr = SAMPLE_RATE as f64;
        let n = (secs * sr).round() as usize;
        let mut out = vec![0.0; n];
        let mut t0 = rng.gen_range(0.02..0.1);
        let mut phase = 0.0f64;
        let vib_rate = rng.gen_range(4.0..6.5);
        while t0 < secs {
            let dur = rng.gen_range(self.syllable_sec.0..self.syllable_sec.1);
            let vowel = rng.gen_range(0..self.vowels.len());
            let pitch = 1.0 + rng.gen_range(-0.08..0.08);
            let start = (t0 * sr) as usize;
            let end = ((t0 + dur) * sr).min(n as f64) as usize;
            let gains = self.harmonic_gains(self.f0 * pitch, vowel);
            for (i, o) in out.iter_mut().enumerate().take(end).skip(start) {
                let t = i as f64 / sr;
                let x = (t - t0) / dur;
                let env = (PI * x).sin().max(0.0).powf(1.5);
                let f0 = self.f0 * pitch * (1.0 + 0.03 * (2.0 * PI * vib_rate * t).sin()) * (1.0 - 0.08 * t / secs);
                phase += 2.0 * PI * f0 / sr;
                let mut v = 0.0;
                for (h, g) in gains.iter().enumerate() {
                    if (h + 1) as f64 * f0 < 0.45 * sr {
                        v += g * ((h + 1) as f64 * phase).sin();
                    }
                }
                *o = env * (v + 0.02 * rng.gen_range(-1.0..1.0));
            }
            t0 += dur + rng.gen_range(0.02..0.15);
        }
        normalize(out)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x *= TARGET_RMS / rms);
    }
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.99 {
        v.iter_mut().for_each(|x| *x *= 0.99 / peak);
    }
    v
}

/// Second-order band-pass (constant 0 dB peak gain).
fn bandpass(x: &[f64], fc: f64, q: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * fc / SAMPLE_RATE as f64;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn noise_recording(secs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let n = (secs * sr).round() as usize;
    let bands = rng.gen_range(2..=3);
    let mut out = vec![0.0; n];
    for _ in 0..bands {
        let white: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fc = (rng.gen_range(150f64.ln()..6000f64.ln())).exp();
        let q = rng.gen_range(0.7..4.0);
        let level = rng.gen_range(0.3..1.0);
        for (o, v) in out.iter_mut().zip(bandpass(&white, fc, q)) {
            *o += level * v;
        }
    }
    // Stationary bed plus bursts.
    let mut env = vec![0.35; n];
    let bursts = (secs * rng.gen_range(1.0..3.0)).ceil() as usize;
    for _ in 0..bursts {
        let start = rng.gen_range(0.0..secs);
        let dur = rng.gen_range(0.05..0.4);
        let amp = rng.gen_range(0.5..2.0);
        let (s, e) = ((start * sr) as usize, (((start + dur) * sr) as usize).min(n));
        for (i, v) in env.iter_mut().enumerate().take(e).skip(s) {
            let x = (i - s) as f64 / (e - s).max(1) as f64;
            *v += amp * (PI * x).sin();
        }
    }
    normalize(out.iter().zip(&env).map(|(a, b)| a * b).collect())
}

/// Generates the corpus in memory.
pub fn synthesize_corpus(spec: &SyntheticSpec) -> Result<Vec<(ManifestEntry, AudioClip<f32>)>> {
    let mut items = Vec::new();
    let mut add = |path: String, speaker: String, tag: CorpusTag, samples: Vec<f64>| -> Result<()> {
        let clip = AudioClip::<f32>::new(samples.iter().map(|&v| v as f32).collect(), SAMPLE_RATE)?;
        items.push((
            ManifestEntry {
                path: PathBuf::from(path),
                speaker_id: speaker,
                duration_sec: clip.duration_sec(),
                sample_rate: SAMPLE_RATE,
                corpus_tag: tag,
            },
            clip,
        ));
        Ok(())
    };
    let speakers = (0..spec.test_speakers)
        .map(|i| (format!("spk-t{i}"), spec.test_speaker_sec, 0u64, i))
        .chain((0..spec.general_speakers).map(|i| (format!("spk-g{i}"), spec.general_speaker_sec, 1u64, i)));
    for (name, total, group, i) in speakers {
        let mut rng = rng_for(spec.seed, &[group, i as u64]);
        // Test speakers get well-separated fundamentals; general ones are random.
        let f0 = if group == 0 {
            let span = (spec.test_speakers.max(2) - 1) as f64;
            100.0 + 140.0 * i as f64 / span + rng.gen_range(-5.0..5.0)
        } else {
            rng.gen_range(90.0..260.0)
        };
        let voice = Voice::random(&mut rng, f0);
        let mut done = 0.0;
        let mut u = 0;
        while done < total {
            let secs = rng.gen_range(1.2..2.4f64).min((total - done).max(1.2));
            let samples = voice.utterance(secs, &mut rng);
            // Count what was written, not what was asked for, so rounding
            // never leaves a speaker short.
            done += samples.len() as f64 / SAMPLE_RATE as f64;
            add(format!("speech/{name}/u{u:03}.wav"), name.clone(), CorpusTag::Speech, samples)?;
            u += 1;
        }
    }
    for (tag, label, (count, secs), group) in [
        (CorpusTag::NoiseTrain, "train", spec.noise_train, 10u64),
        (CorpusTag::NoiseTest, "test", spec.noise_test, 11),
        (CorpusTag::NoisePremix, "premix", spec.noise_premix, 12),
    ] {
        for i in 0..count {
            let mut rng = rng_for(spec.seed, &[group, i as u64]);
            add(
                format!("noise/{label}/n{i:02}.wav"),
                format!("noise-{label}-n{i:02}"),
                tag,
                noise_recording(secs, &mut rng),
            )?;
        }
    }
    Ok(items)
}

/// Writes the corpus as float WAVs under `out_dir` and returns its manifest
/// (paths relative to `out_dir`).
pub fn write_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<CorpusManifest> {
    let items = synthesize_corpus(spec)?;
    for (entry, clip) in &items {
        let path = out_dir.join(&entry.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_wav(&path, clip)?;
    }
    CorpusManifest::new(items.into_iter().map(|(e, _)| e).collect())
}
