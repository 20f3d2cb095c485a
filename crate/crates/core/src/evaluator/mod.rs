//! Per-speaker SI-SDRi evaluation and the report grid.
//!
//! Evaluation mixtures are frozen per `(speaker, protocol seed)`, so every
//! scheme and architecture is scored on the same audio. The grid holds one
//! cell per (architecture, scheme, premix SNR, finetuning budget), with the
//! mean and standard deviation taken over speakers.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use report::{emit_report, format_cell, load_report, render_text, row_label, ReportFormat};

use crate::corpus::{sample_mixtures, BatchSpec, ClipSet, SealedSet, TrainingExample};
use crate::error::{Error, Result};
use crate::metrics::si_sdr_improvement;
use crate::models::{Model, ModelCheckpoint};
use crate::scalar::Scalar;
use crate::seed::{rng_for, stable_hash};
use crate::signal::AudioClip;

/// How evaluation mixtures are generated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub n_mixtures: usize,
    pub snr_range_db: (f64, f64),
    pub clip_sec: f64,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_mixtures: 100,
            snr_range_db: (-5.0, 5.0),
            clip_sec: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub mean_sisdri_db: f64,
    /// Population standard deviation over mixtures.
    pub std_sisdri_db: f64,
    pub n_mixtures: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Frozen evaluation mixtures of one speaker.
#[derive(Clone, Debug)]
pub struct EvalSet<T> {
    pub speaker_id: String,
    pub protocol: EvalProtocol,
    examples: Vec<TrainingExample<T>>,
}

impl<T: Scalar> EvalSet<T> {
    /// Mixes the speaker's held-out speech with test noise. This is the
    /// only place held-out clean audio is read.
    pub fn build(speaker_id: &str, held_out: &SealedSet<T>, noise_test: &ClipSet<T>, protocol: &EvalProtocol) -> Result<Self> {
        if noise_test.is_empty() {
            return Err(Error::EmptySet("test noise set".into()));
        }
        let spec = BatchSpec {
            batch_size: protocol.n_mixtures,
            snr_range_db: protocol.snr_range_db,
            clip_sec: protocol.clip_sec,
        };
        let mut rng = rng_for(protocol.seed, &[stable_hash(speaker_id)]);
        let examples = sample_mixtures(held_out.unseal(), noise_test, &spec, &mut rng)?;
        Ok(EvalSet {
            speaker_id: speaker_id.to_string(),
            protocol: *protocol,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn noise_ids(&self) -> BTreeSet<String> {
        self.examples.iter().map(|e| e.noise_id.clone()).collect()
    }

    pub fn mixtures(&self) -> impl Iterator<Item = &AudioClip<T>> {
        self.examples.iter().map(|e| &e.input)
    }

    /// Scores an arbitrary enhancer. `enhance` receives the mixture and,
    /// for oracle baselines, the hidden clean target.
    pub fn score_with<F>(&self, mut enhance: F) -> Result<(SpeakerStats, Vec<f64>)>
    where
        F: FnMut(&AudioClip<T>, &AudioClip<T>) -> Result<AudioClip<T>>,
    {
        let mut values = Vec::with_capacity(self.examples.len());
        for e in &self.examples {
            let y = enhance(&e.input, &e.target)?;
            values.push(si_sdr_improvement(&e.target, &e.input, &y)?);
        }
        let (mean, std) = mean_std(&values);
        Ok((
            SpeakerStats {
                mean_sisdri_db: mean,
                std_sisdri_db: std,
                n_mixtures: values.len(),
            },
            values,
        ))
    }

    pub fn score(&self, model: &Model<T>) -> Result<SpeakerStats> {
        Ok(self.score_with(|x, _| model.enhance(x))?.0)
    }
}

/// Fails if any recording in `noise_test` also appears in `others`.
pub fn check_noise_disjoint<T: Scalar>(noise_test: &ClipSet<T>, others: &[&ClipSet<T>]) -> Result<()> {
    let test: BTreeSet<String> = noise_test.ids().into_iter().collect();
    for o in others {
        if let Some(shared) = o.ids().into_iter().find(|id| test.contains(id)) {
            return Err(Error::Config(format!("noise {shared} is used for both evaluation and training")));
        }
    }
    Ok(())
}

/// Scores `checkpoint` on the speaker's frozen evaluation mixtures.
pub fn evaluate_speaker<T: Scalar>(
    checkpoint: &ModelCheckpoint<T>,
    speaker_id: &str,
    held_out: &SealedSet<T>,
    noise_test: &ClipSet<T>,
    protocol: &EvalProtocol,
) -> Result<SpeakerStats> {
    let set = EvalSet::build(speaker_id, held_out, noise_test, protocol)?;
    set.score(&checkpoint.to_model()?)
}

/// Coordinates of a grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridKey {
    pub architecture: String,
    pub scheme: String,
    pub premix_snr_db: Option<f64>,
    pub ft_budget_sec: f64,
}

impl GridKey {
    fn sort_key(&self) -> (String, u8, String, i64, i64) {
        let premix = self.premix_snr_db.map_or(i64::MIN, |s| (s * 1000.0).round() as i64);
        (
            self.architecture.clone(),
            scheme_rank(&self.scheme),
            self.scheme.clone(),
            premix,
            (self.ft_budget_sec * 1000.0).round() as i64,
        )
    }
}

/// Table row order: random init, multi-speaker, PseudoSE, CM, others.
pub(crate) fn scheme_rank(scheme: &str) -> u8 {
    match scheme {
        "random-init" => 0,
        "multispeaker" => 1,
        "pseudose" => 2,
        "cm" => 3,
        _ => 4,
    }
}

/// One speaker's result for one grid key and training seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerReport {
    pub speaker_id: String,
    pub train_seed: u64,
    pub key: GridKey,
    pub protocol: EvalProtocol,
    pub stats: SpeakerStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub key: GridKey,
    /// Mean over speakers.
    pub mean_sisdri_db: f64,
    /// Population standard deviation over speakers.
    pub std_sisdri_db: f64,
    pub n_speakers: usize,
    /// Training seeds averaged per speaker.
    pub n_seeds: usize,
    /// Per-speaker stats, averaged over seeds.
    pub speakers: BTreeMap<String, SpeakerStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub cells: Vec<GridCell>,
    /// The inputs the grid was aggregated from.
    pub reports: Vec<SpeakerReport>,
}

impl EvalReport {
    pub fn cell(&self, architecture: &str, scheme: &str, premix_snr_db: Option<f64>, ft_budget_sec: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| {
            c.key.architecture == architecture
                && c.key.scheme == scheme
                && c.key.premix_snr_db == premix_snr_db
                && c.key.ft_budget_sec == ft_budget_sec
        })
    }

    pub fn architectures(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.cells.iter().map(|c| c.key.architecture.clone()).collect();
        set.into_iter().collect()
    }
}

/// Groups per-speaker results into grid cells. Results for the same
/// speaker and key under several training seeds are averaged first.
pub fn aggregate_grid(reports: &[SpeakerReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::EmptySet("no evaluation results".into()))?;
    for r in reports {
        if r.protocol != first.protocol {
            return Err(Error::ProtocolMismatch(format!(
                "{:?} vs {:?} (speaker {})",
                first.protocol, r.protocol, r.speaker_id
            )));
        }
    }
    // Key -> speaker -> seed -> stats; BTreeMaps make the sums independent
    // of input order.
    type Seeds = BTreeMap<u64, SpeakerStats>;
    let mut groups: BTreeMap<(String, u8, String, i64, i64), (GridKey, BTreeMap<String, Seeds>)> = BTreeMap::new();
    for r in reports {
        let entry = groups
            .entry(r.key.sort_key())
            .or_insert_with(|| (r.key.clone(), BTreeMap::new()));
        let seeds = entry.1.entry(r.speaker_id.clone()).or_default();
        if seeds.insert(r.train_seed, r.stats).is_some() {
            return Err(Error::ProtocolMismatch(format!(
                "duplicate result for speaker {} seed {} in {:?}",
                r.speaker_id, r.train_seed, r.key
            )));
        }
    }
    let mut cells = Vec::with_capacity(groups.len());
    for (_, (key, speakers)) in groups {
        let mut per_speaker = BTreeMap::new();
        let mut n_seeds = 0;
        for (spk, seeds) in speakers {
            let means: Vec<f64> = seeds.values().map(|s| s.mean_sisdri_db).collect();
            let stds: Vec<f64> = seeds.values().map(|s| s.std_sisdri_db).collect();
            n_seeds = n_seeds.max(seeds.len());
            per_speaker.insert(
                spk,
                SpeakerStats {
                    mean_sisdri_db: mean_std(&means).0,
                    std_sisdri_db: mean_std(&stds).0,
                    n_mixtures: seeds.values().map(|s| s.n_mixtures).sum::<usize>() / seeds.len(),
                },
            );
        }
        let means: Vec<f64> = per_speaker.values().map(|s| s.mean_sisdri_db).collect();
        let (mean, std) = mean_std(&means);
        cells.push(GridCell {
            key,
            mean_sisdri_db: mean,
            std_sisdri_db: std,
            n_speakers: per_speaker.len(),
            n_seeds,
            speakers: per_speaker,
        });
    }
    let mut pooled = reports.to_vec();
    pooled.sort_by(|a, b| {
        (a.key.sort_key(), &a.speaker_id, a.train_seed).cmp(&(b.key.sort_key(), &b.speaker_id, b.train_seed))
    });
    Ok(EvalReport {
        protocol: first.protocol,
        cells,
        reports: pooled,
    })
}

/// Re-aggregates the results of several reports into one grid.
pub fn merge_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let pooled: Vec<SpeakerReport> = reports.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    aggregate_grid(&pooled)
}

#[cfg(test)]
mod tests;
