use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SAMPLE_RATE;

/// Role of a recording in the experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusTag {
    Speech,
    /// Noises for mixing during (pre)training and finetuning.
    NoiseTrain,
    /// Unseen noises for evaluation mixtures.
    NoiseTest,
    /// Noises that contaminate the speaker's premixture recordings.
    NoisePremix,
}

impl fmt::Display for CorpusTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorpusTag::Speech => "speech",
            CorpusTag::NoiseTrain => "noise-train",
            CorpusTag::NoiseTest => "noise-test",
            CorpusTag::NoisePremix => "noise-premix",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for CorpusTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown corpus tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker_id: String,
    pub duration_sec: f64,
    pub sample_rate: u32,
    pub corpus_tag: CorpusTag,
}

impl ManifestEntry {
    /// Audio id used in traces and partitions.
    pub fn id(&self) -> String {
        self.path.to_string_lossy().into_owned()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = CorpusManifest { entries };
        m.validate(Path::new("<memory>"))?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_tag(&self, tag: CorpusTag) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.corpus_tag == tag)
    }

    /// Speaker ids of speech entries, sorted and deduplicated.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.with_tag(CorpusTag::Speech).map(|e| e.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let mut errors = Vec::new();
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let name = format!("entry {} ({})", i + 1, e.path.display());
            if !(e.duration_sec > 0.0 && e.duration_sec.is_finite()) {
                errors.push(format!("{name}: duration_sec must be positive, got {}", e.duration_sec));
            }
            if e.sample_rate != SAMPLE_RATE {
                errors.push(format!(
                    "{name}: sample_rate {} Hz differs from the required {SAMPLE_RATE} Hz",
                    e.sample_rate
                ));
            }
            if e.speaker_id.is_empty() {
                errors.push(format!("{name}: empty speaker_id"));
            }
            if !seen.insert(&e.path) {
                errors.push(format!("{name}: duplicate path"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest {
                path: path.to_path_buf(),
                errors,
            })
        }
    }
}

/// Reads a JSON Lines manifest; every malformed or invalid entry is reported.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestEntry>(&line) {
            Ok(e) => entries.push(e),
            Err(err) => errors.push(format!("line {}: {err}", i + 1)),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            errors,
        });
    }
    let m = CorpusManifest { entries };
    m.validate(path)?;
    Ok(m)
}

pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &manifest.entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
