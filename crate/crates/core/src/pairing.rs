//! Positive and negative mixture pairs for contrastive-mixtures pretraining.
//!
//! A positive pair shares one pseudo-source under two different noises; a
//! negative pair puts two different pseudo-sources under one shared noise
//! realization.

use std::sync::Arc;

use rand::Rng;

use crate::corpus::{ClipSet, PremixtureSet};
use crate::error::{Error, Result};
use crate::metrics::{NegativeTerm, PositiveTerm};
use crate::scalar::Scalar;
use crate::signal::{add_scaled, duration_to_samples, random_offset, snr_gain, AudioClip, SAMPLE_RATE};

/// A cropped segment of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment<T> {
    pub recording_id: String,
    pub offset: usize,
    pub clip: AudioClip<T>,
}

impl<T: Scalar> Segment<T> {
    fn draw<R: Rng + ?Sized>(set: &ClipSet<T>, index: usize, len: usize, rng: &mut R) -> Result<Self> {
        let u = &set.items()[index];
        let (offset, len) = random_offset(u.clip.len(), len, rng)?;
        Ok(Segment {
            recording_id: u.id.clone(),
            offset,
            clip: u.clip.segment(offset, len)?,
        })
    }

    fn same_draw(&self, other: &Self) -> bool {
        (self.recording_id == other.recording_id && self.offset == other.offset) || self.clip == other.clip
    }
}

#[derive(Clone, Debug)]
pub struct PositivePair<T> {
    pub source_id: String,
    /// Target of both mixtures.
    pub s_tilde: Arc<AudioClip<T>>,
    pub x1: AudioClip<T>,
    pub x2: AudioClip<T>,
    pub scaled_n1: AudioClip<T>,
    pub scaled_n2: AudioClip<T>,
    pub n1_id: String,
    pub n2_id: String,
    pub snr1_db: f64,
    pub snr2_db: f64,
}

#[derive(Clone, Debug)]
pub struct NegativePair<T> {
    pub source1_id: String,
    pub source2_id: String,
    pub s1_tilde: AudioClip<T>,
    pub s2_tilde: AudioClip<T>,
    pub x1: AudioClip<T>,
    pub x2: AudioClip<T>,
    /// The single noise realization added to both mixtures.
    pub scaled_noise: AudioClip<T>,
    pub n_id: String,
    pub snr_db: f64,
}

#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    pub positives: Vec<PositivePair<T>>,
    pub negatives: Vec<NegativePair<T>>,
}

fn noise_label<T>(s: &Segment<T>) -> String {
    format!("{}@{}", s.recording_id, s.offset)
}

/// Mixes one pseudo-source with two distinct noise draws.
pub fn make_positive_pair<T: Scalar>(
    source_id: &str,
    s_tilde: Arc<AudioClip<T>>,
    n1: &Segment<T>,
    n2: &Segment<T>,
    snr1_db: f64,
    snr2_db: f64,
) -> Result<PositivePair<T>> {
    if n1.same_draw(n2) {
        return Err(Error::DegeneratePair(format!(
            "positive pair on {source_id} uses the same noise segment twice ({})",
            noise_label(n1)
        )));
    }
    s_tilde.check_compatible(&n1.clip)?;
    s_tilde.check_compatible(&n2.clip)?;
    let g1 = snr_gain(&s_tilde, &n1.clip, snr1_db)?;
    let g2 = snr_gain(&s_tilde, &n2.clip, snr2_db)?;
    let m1 = add_scaled(&s_tilde, n1.clip.scaled(g1), g1);
    let m2 = add_scaled(&s_tilde, n2.clip.scaled(g2), g2);
    Ok(PositivePair {
        source_id: source_id.to_string(),
        s_tilde,
        x1: m1.mixture,
        x2: m2.mixture,
        scaled_n1: m1.scaled_interference,
        scaled_n2: m2.scaled_interference,
        n1_id: noise_label(n1),
        n2_id: noise_label(n2),
        snr1_db,
        snr2_db,
    })
}

/// Mixes two different pseudo-sources with one shared noise realization,
/// scaled against the first source.
pub fn make_negative_pair<T: Scalar>(
    s1: &Segment<T>,
    s2: &Segment<T>,
    n: &Segment<T>,
    snr_db: f64,
) -> Result<NegativePair<T>> {
    if s1.recording_id == s2.recording_id || s1.clip == s2.clip {
        return Err(Error::DegeneratePair(format!(
            "negative pair needs two different premixture items, got {} twice",
            s1.recording_id
        )));
    }
    s1.clip.check_compatible(&s2.clip)?;
    s1.clip.check_compatible(&n.clip)?;
    let gain = snr_gain(&s1.clip, &n.clip, snr_db)?;
    let scaled = n.clip.scaled(gain);
    let m1 = add_scaled(&s1.clip, scaled.clone(), gain);
    let m2 = add_scaled(&s2.clip, scaled, gain);
    Ok(NegativePair {
        source1_id: s1.recording_id.clone(),
        source2_id: s2.recording_id.clone(),
        s1_tilde: s1.clip.clone(),
        s2_tilde: s2.clip.clone(),
        x1: m1.mixture,
        x2: m2.mixture,
        scaled_noise: m1.scaled_interference,
        n_id: noise_label(n),
        snr_db,
    })
}

/// Draws `pairs` positive and `pairs` negative pairs from the premixtures.
///
/// Positive-pair SNRs are drawn independently per mixture, negative-pair SNRs
/// once per pair. Items may recur across pairs of one batch.
pub fn build_pair_batch<T: Scalar, R: Rng + ?Sized>(
    premixtures: &PremixtureSet<T>,
    noise_train: &ClipSet<T>,
    pairs: usize,
    snr_range_db: (f64, f64),
    clip_sec: f64,
    rng: &mut R,
) -> Result<PairBatch<T>> {
    if premixtures.len() < 2 {
        return Err(Error::EmptySet(format!(
            "negative pairs need at least 2 premixture items, have {}",
            premixtures.len()
        )));
    }
    if noise_train.is_empty() {
        return Err(Error::EmptySet("noise set".into()));
    }
    if pairs == 0 {
        return Err(Error::Config("pair count must be at least 1".into()));
    }
    let sources = premixtures.as_clip_set();
    let len = duration_to_samples(clip_sec, SAMPLE_RATE);
    let snr = |rng: &mut R| crate::corpus::sampler_snr(snr_range_db, rng);
    let mut positives = Vec::with_capacity(pairs);
    let mut negatives = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let s = Segment::draw(&sources, rng.gen_range(0..sources.len()), len, rng)?;
        let n1 = Segment::draw(noise_train, rng.gen_range(0..noise_train.len()), len, rng)?;
        let n2 = draw_distinct(noise_train, &n1, len, rng)?;
        let (snr1, snr2) = (snr(rng), snr(rng));
        positives.push(make_positive_pair(&s.recording_id, Arc::new(s.clip), &n1, &n2, snr1, snr2)?);

        let i = rng.gen_range(0..sources.len());
        let mut j = rng.gen_range(0..sources.len() - 1);
        if j >= i {
            j += 1;
        }
        let s1 = Segment::draw(&sources, i, len, rng)?;
        let s2 = Segment::draw(&sources, j, len, rng)?;
        let n = Segment::draw(noise_train, rng.gen_range(0..noise_train.len()), len, rng)?;
        negatives.push(make_negative_pair(&s1, &s2, &n, snr(rng))?);
    }
    Ok(PairBatch {
        positives,
        negatives,
    })
}

/// Second noise draw: a different recording when one exists.
fn draw_distinct<T: Scalar, R: Rng + ?Sized>(
    set: &ClipSet<T>,
    first: &Segment<T>,
    len: usize,
    rng: &mut R,
) -> Result<Segment<T>> {
    for _ in 0..64 {
        let idx = if set.len() > 1 {
            let first_idx = set.items().iter().position(|u| u.id == first.recording_id).unwrap_or(0);
            let k = rng.gen_range(0..set.len() - 1);
            if k >= first_idx {
                k + 1
            } else {
                k
            }
        } else {
            0
        };
        let cand = Segment::draw(set, idx, len, rng)?;
        if !cand.same_draw(first) {
            return Ok(cand);
        }
    }
    Err(Error::DegeneratePair("could not draw two distinct noise segments".into()))
}

impl<T: Scalar> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    /// All model inputs in a fixed order: for each positive pair `x1, x2`,
    /// then for each negative pair `x1, x2`.
    pub fn inputs(&self) -> Vec<&AudioClip<T>> {
        self.positives
            .iter()
            .flat_map(|p| [&p.x1, &p.x2])
            .chain(self.negatives.iter().flat_map(|n| [&n.x1, &n.x2]))
            .collect()
    }

    /// Target of each input in [`PairBatch::inputs`] order.
    pub fn targets(&self) -> Vec<&AudioClip<T>> {
        self.positives
            .iter()
            .flat_map(|p| [&*p.s_tilde, &*p.s_tilde])
            .chain(self.negatives.iter().flat_map(|n| [&n.s1_tilde, &n.s2_tilde]))
            .collect()
    }

    /// Every audio id the batch was built from.
    pub fn source_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for p in &self.positives {
            ids.push(p.source_id.clone());
        }
        for n in &self.negatives {
            ids.push(n.source1_id.clone());
            ids.push(n.source2_id.clone());
        }
        ids
    }

    pub fn noise_ids(&self) -> Vec<String> {
        let strip = |s: &str| s.rsplit_once('@').map(|(a, _)| a.to_string()).unwrap_or_else(|| s.to_string());
        let mut ids = Vec::new();
        for p in &self.positives {
            ids.push(strip(&p.n1_id));
            ids.push(strip(&p.n2_id));
        }
        for n in &self.negatives {
            ids.push(strip(&n.n_id));
        }
        ids
    }

    /// Pairs the batch with estimates given in [`PairBatch::inputs`] order.
    pub fn loss_terms<'a>(
        &'a self,
        estimates: &'a [Vec<T>],
    ) -> Result<(Vec<PositiveTerm<'a, T>>, Vec<NegativeTerm<'a, T>>)> {
        let expected = 2 * (self.positives.len() + self.negatives.len());
        if estimates.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} estimates for {expected} mixtures",
                estimates.len()
            )));
        }
        let np = self.positives.len();
        let pos = self
            .positives
            .iter()
            .enumerate()
            .map(|(i, p)| PositiveTerm {
                source: p.s_tilde.samples(),
                y1: &estimates[2 * i],
                y2: &estimates[2 * i + 1],
            })
            .collect();
        let neg = self
            .negatives
            .iter()
            .enumerate()
            .map(|(i, n)| NegativeTerm {
                source1: n.s1_tilde.samples(),
                source2: n.s2_tilde.samples(),
                y1: &estimates[2 * (np + i)],
                y2: &estimates[2 * (np + i) + 1],
            })
            .collect();
        Ok((pos, neg))
    }
}
