use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClipSet, SealedSet, Utterance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::signal::wav::{read_wav, write_wav};
use crate::signal::{mix_at_snr, random_offset, AudioClip};

/// Premixture SNRs used by the experiments, in dB.
pub const DEFAULT_PREMIX_SNRS: [f64; 2] = [5.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PremixConfig {
    /// `+inf` disables premixing (debug only).
    pub snr_db: f64,
    /// Half-width of a uniform per-utterance SNR jitter; 0 disables it.
    #[serde(default)]
    pub jitter_db: f64,
    pub seed: u64,
}

/// One noisy recording of a test speaker.
#[derive(Clone, Debug)]
pub struct PremixItem<T> {
    /// Id of the premixed recording, `premix:<clean id>`.
    pub id: String,
    pub clean_ref_id: String,
    pub premix_noise_id: String,
    pub noise_offset: usize,
    pub premix_snr_db: f64,
    pub premixed: Arc<AudioClip<T>>,
}

/// Frozen premixtures for one speaker.
#[derive(Clone, Debug)]
pub struct PremixtureSet<T> {
    pub speaker_id: String,
    pub config: PremixConfig,
    items: Vec<PremixItem<T>>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    clean_ref_id: String,
    premix_noise_id: String,
    noise_offset: usize,
    premix_snr_db: f64,
    file: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Index {
    speaker_id: String,
    config: PremixConfig,
    items: Vec<IndexEntry>,
}

impl<T: Scalar> PremixtureSet<T> {
    pub fn items(&self) -> &[PremixItem<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Premixed recordings as a clip set (ids are the premix ids).
    pub fn as_clip_set(&self) -> ClipSet<T> {
        ClipSet::new(
            self.items
                .iter()
                .map(|i| Utterance {
                    id: i.id.clone(),
                    speaker_id: self.speaker_id.clone(),
                    clip: Arc::clone(&i.premixed),
                })
                .collect(),
        )
    }

    /// Splits off every `every`-th item (by position) as a validation set.
    pub fn split_validation(&self, every: usize) -> (PremixtureSet<T>, PremixtureSet<T>) {
        let every = every.max(2);
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, item) in self.items.iter().enumerate() {
            if i % every == every - 1 {
                val.push(item.clone());
            } else {
                train.push(item.clone());
            }
        }
        let wrap = |items| PremixtureSet {
            speaker_id: self.speaker_id.clone(),
            config: self.config,
            items,
        };
        (wrap(train), wrap(val))
    }

    /// Writes one float WAV per item plus `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.items.len());
        for (i, item) in self.items.iter().enumerate() {
            let file = PathBuf::from(format!("premix_{i:05}.wav"));
            write_wav(&dir.join(&file), &item.premixed)?;
            entries.push(IndexEntry {
                id: item.id.clone(),
                clean_ref_id: item.clean_ref_id.clone(),
                premix_noise_id: item.premix_noise_id.clone(),
                noise_offset: item.noise_offset,
                premix_snr_db: item.premix_snr_db,
                file,
            });
        }
        let index = Index {
            speaker_id: self.speaker_id.clone(),
            config: self.config,
            items: entries,
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index = serde_json::from_slice(&raw)?;
        let items = index
            .items
            .into_iter()
            .map(|e| {
                Ok(PremixItem {
                    premixed: Arc::new(read_wav(&dir.join(&e.file))?),
                    id: e.id,
                    clean_ref_id: e.clean_ref_id,
                    premix_noise_id: e.premix_noise_id,
                    noise_offset: e.noise_offset,
                    premix_snr_db: e.premix_snr_db,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PremixtureSet {
            speaker_id: index.speaker_id,
            config: index.config,
            items,
        })
    }
}

/// Contaminates every held-out utterance with a segment of premixture noise
/// at the configured SNR. Noise recordings are drawn with replacement and
/// cropped at a random offset.
pub fn build_premixture<T: Scalar>(
    speaker_id: &str,
    held_out: &SealedSet<T>,
    noise_premix: &ClipSet<T>,
    config: &PremixConfig,
) -> Result<PremixtureSet<T>> {
    if noise_premix.is_empty() {
        return Err(Error::EmptySet("premixture noise set".into()));
    }
    if config.snr_db.is_nan() || config.snr_db == f64::NEG_INFINITY || !(config.jitter_db >= 0.0) {
        return Err(Error::Config(format!("invalid premixture configuration {config:?}")));
    }
    let mut rng = rng_for(config.seed, &[crate::seed::stable_hash(speaker_id), 0x9e1]);
    let mut items = Vec::with_capacity(held_out.len());
    for utt in held_out.unseal().items() {
        let candidates: Vec<&Utterance<T>> =
            noise_premix.items().iter().filter(|n| n.clip.len() >= utt.clip.len()).collect();
        if candidates.is_empty() {
            return Err(Error::ClipTooShort {
                needed: utt.clip.len(),
                available: noise_premix.items().iter().map(|n| n.clip.len()).max().unwrap_or(0),
            });
        }
        let noise = candidates[rng.gen_range(0..candidates.len())];
        let (offset, len) = random_offset(noise.clip.len(), utt.clip.len(), &mut rng)?;
        let jitter = if config.jitter_db > 0.0 {
            rng.gen_range(-config.jitter_db..=config.jitter_db)
        } else {
            0.0
        };
        let snr = config.snr_db + jitter;
        let segment = noise.clip.segment(offset, len)?;
        let premixed = if snr == f64::INFINITY {
            (*utt.clip).clone()
        } else {
            mix_at_snr(&utt.clip, &segment, snr)?.mixture
        };
        items.push(PremixItem {
            id: format!("premix:{}", utt.id),
            clean_ref_id: utt.id.clone(),
            premix_noise_id: noise.id.clone(),
            noise_offset: offset,
            premix_snr_db: snr,
            premixed: Arc::new(premixed),
        });
    }
    Ok(PremixtureSet {
        speaker_id: speaker_id.to_string(),
        config: *config,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::*;
    use super::*;
    use crate::signal::measured_snr_db;

    fn setup() -> (SpeakerPartition<f64>, PremixConfig) {
        let c = tiny_corpus(2, 10, 8);
        let p = partition_speakers(&c, &spec(&["spk0"], 0.0, 1)).unwrap();
        (p, PremixConfig { snr_db: 10.0, jitter_db: 0.0, seed: 42 })
    }

    #[test]
    fn premixture_snr_is_exact() {
        let (p, cfg) = setup();
        let spk = p.speaker("spk0").unwrap();
        let set = build_premixture("spk0", &spk.held_out, &p.noise_premix, &cfg).unwrap();
        assert_eq!(set.len(), spk.held_out.len());
        for (item, clean) in set.items().iter().zip(spk.held_out.unseal().items()) {
            assert_eq!(item.clean_ref_id, clean.id);
            let noise: Vec<f64> =
                item.premixed.samples().iter().zip(clean.clip.samples()).map(|(m, s)| m - s).collect();
            let noise = AudioClip::new(noise, SAMPLE_RATE).unwrap();
            let snr = measured_snr_db(&clean.clip, &noise);
            assert!((snr - 10.0).abs() < 1e-6, "{snr}");
        }
    }

    #[test]
    fn deterministic_and_persistent() {
        let (p, cfg) = setup();
        let spk = p.speaker("spk0").unwrap();
        let a = build_premixture("spk0", &spk.held_out, &p.noise_premix, &cfg).unwrap();
        let b = build_premixture("spk0", &spk.held_out, &p.noise_premix, &cfg).unwrap();
        for (x, y) in a.items().iter().zip(b.items()) {
            assert_eq!(x.premixed, y.premixed);
        }
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let loaded = PremixtureSet::<f64>::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), a.len());
        for (x, y) in a.items().iter().zip(loaded.items()) {
            assert_eq!(x.id, y.id);
            // Stored as 32-bit float.
            for (u, v) in x.premixed.samples().iter().zip(y.premixed.samples()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn disabled_premixing_returns_clean_audio() {
        let (p, mut cfg) = setup();
        cfg.snr_db = f64::INFINITY;
        let spk = p.speaker("spk0").unwrap();
        let set = build_premixture("spk0", &spk.held_out, &p.noise_premix, &cfg).unwrap();
        for (item, clean) in set.items().iter().zip(spk.held_out.unseal().items()) {
            assert_eq!(*item.premixed, *clean.clip);
        }
    }

    #[test]
    fn empty_noise_set_is_rejected() {
        let (p, cfg) = setup();
        let spk = p.speaker("spk0").unwrap();
        let empty = ClipSet::new(Vec::new());
        assert!(matches!(
            build_premixture("spk0", &spk.held_out, &empty, &cfg),
            Err(Error::EmptySet(_))
        ));
    }
}
