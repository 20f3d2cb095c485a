//! Corpus ingestion, deterministic speaker partitioning, premixture
//! construction and batch sampling.
//!
//! Clean speech of a test speaker's held-out set is wrapped in
//! [`SealedSet`]; only premixture construction and evaluation can open it.
//! Self-supervised training reads the speaker exclusively through a
//! [`PremixtureSet`].

mod manifest;
mod premix;
mod sampler;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, save_manifest, CorpusManifest, CorpusTag, ManifestEntry};
pub use premix::{build_premixture, PremixConfig, PremixItem, PremixtureSet, DEFAULT_PREMIX_SNRS};
pub(crate) use sampler::draw_snr as sampler_snr;
pub use sampler::{
    sample_mixtures, sample_pseudose_batch, sample_supervised_batch, BatchSpec, TrainingExample,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{rng_for, stable_hash};
use crate::signal::{wav::read_wav, AudioClip, SAMPLE_RATE};

/// Finetuning budgets compared in the experiments, in seconds.
pub const FT_BUDGETS_SEC: [f64; 6] = [0.0, 3.0, 5.0, 10.0, 30.0, 60.0];
/// Upper bound on a speaker's clean finetuning pool.
pub const MAX_FT_POOL_SEC: f64 = 180.0;
/// Upper bound on a speaker's held-out set.
pub const MAX_TEST_SEC: f64 = 1320.0;

/// One recording with its provenance.
#[derive(Clone, Debug)]
pub struct Utterance<T> {
    pub id: String,
    pub speaker_id: String,
    pub clip: Arc<AudioClip<T>>,
}

impl<T: Scalar> Utterance<T> {
    pub fn duration_sec(&self) -> f64 {
        self.clip.duration_sec()
    }
}

/// Ordered collection of recordings.
#[derive(Clone, Debug)]
pub struct ClipSet<T> {
    items: Vec<Utterance<T>>,
}

impl<T: Scalar> ClipSet<T> {
    /// Sorts by id so set order never depends on input order.
    pub fn new(mut items: Vec<Utterance<T>>) -> Self {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        ClipSet { items }
    }

    pub fn items(&self) -> &[Utterance<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|u| u.id.clone()).collect()
    }

    pub fn total_duration_sec(&self) -> f64 {
        self.items.iter().map(|u| u.duration_sec()).sum()
    }

    /// Keeps recordings lasting at least `duration_sec`.
    pub fn at_least(&self, duration_sec: f64) -> Self {
        let needed = crate::signal::duration_to_samples(duration_sec, SAMPLE_RATE);
        ClipSet {
            items: self.items.iter().filter(|u| u.clip.len() >= needed).cloned().collect(),
        }
    }
}

/// A test speaker's held-out clean speech.
#[derive(Clone, Debug)]
pub struct SealedSet<T> {
    inner: ClipSet<T>,
}

impl<T: Scalar> SealedSet<T> {
    pub fn new(inner: ClipSet<T>) -> Self {
        SealedSet { inner }
    }

    pub fn ids(&self) -> Vec<String> {
        self.inner.ids()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn total_duration_sec(&self) -> f64 {
        self.inner.total_duration_sec()
    }

    pub(crate) fn unseal(&self) -> &ClipSet<T> {
        &self.inner
    }
}

/// Loaded audio for every manifest entry.
pub struct Corpus<T> {
    manifest: CorpusManifest,
    clips: HashMap<String, Arc<AudioClip<T>>>,
}

impl<T: Scalar> Corpus<T> {
    /// Reads every entry, resolving relative paths against `base_dir`.
    ///
    /// Recordings shorter than `min_duration_sec` or whose length disagrees
    /// with the declared duration are rejected.
    pub fn load(manifest: CorpusManifest, base_dir: &Path, min_duration_sec: f64) -> Result<Self> {
        let mut clips = HashMap::new();
        let mut errors = Vec::new();
        for e in &manifest.entries {
            let path = if e.path.is_absolute() {
                e.path.clone()
            } else {
                base_dir.join(&e.path)
            };
            match read_wav::<T>(&path) {
                Ok(clip) => {
                    if clip.sample_rate() != e.sample_rate {
                        errors.push(format!("{}: file is {} Hz", e.path.display(), clip.sample_rate()));
                    } else if (clip.duration_sec() - e.duration_sec).abs() > 1e-3 {
                        errors.push(format!(
                            "{}: declared {} s but file lasts {} s",
                            e.path.display(),
                            e.duration_sec,
                            clip.duration_sec()
                        ));
                    } else if clip.duration_sec() + 1e-9 < min_duration_sec {
                        errors.push(format!(
                            "{}: {} s is shorter than the {} s clip length",
                            e.path.display(),
                            clip.duration_sec(),
                            min_duration_sec
                        ));
                    } else {
                        clips.insert(e.id(), Arc::new(clip));
                    }
                }
                Err(err) => errors.push(format!("{}: {err}", e.path.display())),
            }
        }
        if !errors.is_empty() {
            return Err(Error::Manifest {
                path: base_dir.to_path_buf(),
                errors,
            });
        }
        Ok(Corpus { manifest, clips })
    }

    /// Builds a corpus from clips already in memory.
    pub fn from_clips(items: Vec<(ManifestEntry, AudioClip<T>)>) -> Result<Self> {
        let manifest = CorpusManifest::new(items.iter().map(|(e, _)| e.clone()).collect())?;
        let clips = items.into_iter().map(|(e, c)| (e.id(), Arc::new(c))).collect();
        Ok(Corpus { manifest, clips })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    fn set_of<'a>(&self, entries: impl Iterator<Item = &'a ManifestEntry>) -> ClipSet<T> {
        ClipSet::new(
            entries
                .map(|e| Utterance {
                    id: e.id(),
                    speaker_id: e.speaker_id.clone(),
                    clip: Arc::clone(&self.clips[&e.id()]),
                })
                .collect(),
        )
    }
}

/// Parameters of [`partition_speakers`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub test_speakers: Vec<String>,
    /// Clean seconds handed to finetuning.
    pub ft_budget_sec: f64,
    /// Clean seconds reserved per speaker for finetuning. Every budget is
    /// drawn from this pool so the held-out set does not depend on the
    /// budget. Defaults to the budget.
    #[serde(default)]
    pub ft_pool_sec: Option<f64>,
    /// Minimum held-out speech per speaker.
    pub min_eval_sec: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn pool_sec(&self) -> f64 {
        self.ft_pool_sec.unwrap_or(self.ft_budget_sec)
    }
}

/// Per-speaker sets.
#[derive(Clone, Debug)]
pub struct TestSpeaker<T> {
    pub speaker_id: String,
    /// Clean finetuning candidates, in selection order.
    pub ft_pool: Vec<Utterance<T>>,
    /// Seconds reserved for the pool; budgets may not exceed it.
    pub ft_pool_sec: f64,
    /// Selected few-shot clean set.
    pub finetune: ClipSet<T>,
    pub ft_budget_sec: f64,
    /// Held-out clean speech; source of premixtures and evaluation audio.
    pub held_out: SealedSet<T>,
}

impl<T: Scalar> TestSpeaker<T> {
    /// Reselects the finetuning set for another budget from the same pool.
    pub fn with_ft_budget(&self, budget_sec: f64) -> Result<Self> {
        if !(budget_sec >= 0.0) || budget_sec > self.ft_pool_sec + 1e-9 {
            return Err(Error::InsufficientMaterial {
                speaker: self.speaker_id.clone(),
                reason: format!("finetune budget {budget_sec} s exceeds the {} s pool", self.ft_pool_sec),
            });
        }
        let mut s = self.clone();
        s.finetune = ClipSet::new(greedy_fill(&self.ft_pool, budget_sec).0);
        s.ft_budget_sec = budget_sec;
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct SpeakerPartition<T> {
    /// Many-speaker set without any test speaker.
    pub general: ClipSet<T>,
    pub speakers: BTreeMap<String, TestSpeaker<T>>,
    pub noise_train: ClipSet<T>,
    pub noise_test: ClipSet<T>,
    pub noise_premix: ClipSet<T>,
}

impl<T: Scalar> SpeakerPartition<T> {
    pub fn speaker(&self, id: &str) -> Result<&TestSpeaker<T>> {
        self.speakers
            .get(id)
            .ok_or_else(|| Error::Config(format!("{id} is not a test speaker")))
    }

    /// Every audio id belonging to a test speaker.
    pub fn test_speaker_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for s in self.speakers.values() {
            ids.extend(s.ft_pool.iter().map(|u| u.id.clone()));
            ids.extend(s.held_out.ids());
        }
        ids
    }
}

/// Walks `items` in order, keeping each one that still fits in the budget.
fn greedy_fill<T: Scalar>(items: &[Utterance<T>], budget_sec: f64) -> (Vec<Utterance<T>>, Vec<Utterance<T>>) {
    let mut total = 0.0;
    let (mut kept, mut rest) = (Vec::new(), Vec::new());
    for u in items {
        let d = u.duration_sec();
        if total + d <= budget_sec + 1e-9 {
            total += d;
            kept.push(u.clone());
        } else {
            rest.push(u.clone());
        }
    }
    (kept, rest)
}

/// Splits the corpus into the general set, per-speaker finetune/held-out
/// sets and the three noise sets.
pub fn partition_speakers<T: Scalar>(corpus: &Corpus<T>, spec: &PartitionSpec) -> Result<SpeakerPartition<T>> {
    let pool_sec = spec.pool_sec();
    if !(spec.ft_budget_sec >= 0.0 && spec.ft_budget_sec <= pool_sec && pool_sec < MAX_FT_POOL_SEC) {
        return Err(Error::Config(format!(
            "finetune budget {} s and pool {pool_sec} s must satisfy 0 <= budget <= pool < {MAX_FT_POOL_SEC} s",
            spec.ft_budget_sec
        )));
    }
    let manifest = corpus.manifest();
    let known = manifest.speakers();
    let mut speakers = BTreeMap::new();
    for sid in &spec.test_speakers {
        if !known.contains(sid) {
            return Err(Error::InsufficientMaterial {
                speaker: sid.clone(),
                reason: "no speech in the manifest".into(),
            });
        }
        let mut utts = corpus
            .set_of(manifest.with_tag(CorpusTag::Speech).filter(|e| &e.speaker_id == sid))
            .items
            .clone();
        let total: f64 = utts.iter().map(|u| u.duration_sec()).sum();
        if total < pool_sec + spec.min_eval_sec {
            return Err(Error::InsufficientMaterial {
                speaker: sid.clone(),
                reason: format!(
                    "{total:.2} s of speech cannot cover a {pool_sec} s finetune pool plus {} s of evaluation audio",
                    spec.min_eval_sec
                ),
            });
        }
        utts.shuffle(&mut rng_for(spec.seed, &[stable_hash(sid)]));
        let (pool, rest) = greedy_fill(&utts, pool_sec);
        let (held_out, _) = greedy_fill(&rest, MAX_TEST_SEC);
        let held_out = ClipSet::new(held_out);
        if held_out.total_duration_sec() < spec.min_eval_sec {
            return Err(Error::InsufficientMaterial {
                speaker: sid.clone(),
                reason: format!(
                    "only {:.2} s left for evaluation after reserving the finetune pool",
                    held_out.total_duration_sec()
                ),
            });
        }
        let speaker = TestSpeaker {
            speaker_id: sid.clone(),
            ft_pool: pool,
            ft_pool_sec: pool_sec,
            finetune: ClipSet::new(Vec::new()),
            ft_budget_sec: 0.0,
            held_out: SealedSet::new(held_out),
        }
        .with_ft_budget(spec.ft_budget_sec)?;
        speakers.insert(sid.clone(), speaker);
    }
    let general = corpus.set_of(
        manifest
            .with_tag(CorpusTag::Speech)
            .filter(|e| !spec.test_speakers.contains(&e.speaker_id)),
    );
    Ok(SpeakerPartition {
        general,
        speakers,
        noise_train: corpus.set_of(manifest.with_tag(CorpusTag::NoiseTrain)),
        noise_test: corpus.set_of(manifest.with_tag(CorpusTag::NoiseTest)),
        noise_premix: corpus.set_of(manifest.with_tag(CorpusTag::NoisePremix)),
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;
    use std::path::PathBuf;

    /// Random-noise corpus: `speakers` x `utts` utterances of 1-2 s plus
    /// two recordings per noise tag.
    pub fn tiny_corpus(speakers: usize, utts: usize, seed: u64) -> Corpus<f64> {
        let mut rng = rng_for(seed, &[]);
        let mut items = Vec::new();
        let mut push = |rng: &mut rand_chacha::ChaCha8Rng, name: String, spk: String, secs: f64, tag| {
            let n = (secs * SAMPLE_RATE as f64) as usize;
            let clip = AudioClip::new((0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(), SAMPLE_RATE).unwrap();
            items.push((
                ManifestEntry {
                    path: PathBuf::from(name),
                    speaker_id: spk,
                    duration_sec: clip.duration_sec(),
                    sample_rate: SAMPLE_RATE,
                    corpus_tag: tag,
                },
                clip,
            ));
        };
        for s in 0..speakers {
            for u in 0..utts {
                let secs = rng.gen_range(1.0..2.0);
                push(&mut rng, format!("spk{s}/u{u:02}.wav"), format!("spk{s}"), secs, CorpusTag::Speech);
            }
        }
        for (tag, name) in [
            (CorpusTag::NoiseTrain, "tr"),
            (CorpusTag::NoiseTest, "te"),
            (CorpusTag::NoisePremix, "pm"),
        ] {
            for i in 0..2 {
                push(&mut rng, format!("noise/{name}{i}.wav"), format!("noise-{name}{i}"), 3.0, tag);
            }
        }
        Corpus::from_clips(items).unwrap()
    }

    pub fn spec(speakers: &[&str], budget: f64, seed: u64) -> PartitionSpec {
        PartitionSpec {
            test_speakers: speakers.iter().map(|s| s.to_string()).collect(),
            ft_budget_sec: budget,
            ft_pool_sec: None,
            min_eval_sec: 2.0,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn zero_budget_gives_empty_finetune_set() {
        let c = tiny_corpus(3, 8, 1);
        let p = partition_speakers(&c, &spec(&["spk0"], 0.0, 5)).unwrap();
        assert!(p.speaker("spk0").unwrap().finetune.is_empty());
    }

    #[test]
    fn budget_beyond_material_is_rejected() {
        let c = tiny_corpus(2, 4, 1);
        match partition_speakers(&c, &spec(&["spk1"], 100.0, 5)) {
            Err(Error::Config(_)) | Err(Error::InsufficientMaterial { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let err = partition_speakers(&c, &spec(&["spk1"], 7.0, 5)).unwrap_err();
        assert!(err.to_string().contains("spk1"), "{err}");
    }

    #[test]
    fn deterministic_and_disjoint() {
        let c = tiny_corpus(4, 10, 2);
        let s = spec(&["spk0", "spk2"], 3.0, 11);
        let a = partition_speakers(&c, &s).unwrap();
        let b = partition_speakers(&c, &s).unwrap();
        for sid in ["spk0", "spk2"] {
            let (x, y) = (a.speaker(sid).unwrap(), b.speaker(sid).unwrap());
            assert_eq!(x.finetune.ids(), y.finetune.ids());
            assert_eq!(x.held_out.ids(), y.held_out.ids());
            for id in x.finetune.ids() {
                assert!(!x.held_out.ids().contains(&id));
            }
        }
        let test_ids = a.test_speaker_ids();
        assert!(a.general.ids().iter().all(|id| !test_ids.contains(id)));
        assert!(a.general.items().iter().all(|u| u.speaker_id == "spk1" || u.speaker_id == "spk3"));
        let noises = [a.noise_train.ids(), a.noise_test.ids(), a.noise_premix.ids()];
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(noises[i].iter().all(|id| !noises[j].contains(id)));
            }
        }
    }

    #[test]
    fn greedy_budget_accounting() {
        let c = tiny_corpus(2, 12, 3);
        let mut s = spec(&["spk0"], 3.0, 4);
        s.ft_pool_sec = Some(8.0);
        let p = partition_speakers(&c, &s).unwrap();
        let spk = p.speaker("spk0").unwrap();
        let used = spk.finetune.total_duration_sec();
        assert!(used <= 3.0 + 1e-9);
        for u in &spk.ft_pool {
            if !spk.finetune.ids().contains(&u.id) {
                assert!(used + u.duration_sec() > 3.0);
            }
        }
        // Other budgets come from the same pool and leave the held-out set alone.
        let bigger = spk.with_ft_budget(5.0).unwrap();
        assert_eq!(bigger.held_out.ids(), spk.held_out.ids());
        assert!(bigger.finetune.total_duration_sec() >= used);
    }
}
