use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Source-to-estimate part of the loss.
    pub se_part: f64,
    /// Estimate-to-estimate part (zero outside contrastive training).
    pub contrastive_part: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Seed of the batch RNG for this step.
    pub batch_seed: u64,
    #[serde(default)]
    pub degenerate_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Number of optimizer updates applied before this validation.
    pub step: usize,
    pub sisdri_db: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Event {
    Header { label: String, seed: u64 },
    Step(StepRecord),
    Validation(ValidationRecord),
    Warning { message: String },
    Access { ids: Vec<String> },
    Summary { best_step: Option<usize>, best_sisdri_db: Option<f64>, stopped_early: bool },
}

/// Everything observed during one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub label: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Ids of every recording read to build training and validation data.
    pub access_log: BTreeSet<String>,
    pub warnings: Vec<String>,
    pub best_step: Option<usize>,
    pub best_sisdri_db: Option<f64>,
    pub stopped_early: bool,
}

impl TrainTrace {
    pub fn new(label: impl Into<String>, seed: u64) -> Self {
        TrainTrace {
            label: label.into(),
            seed,
            ..Default::default()
        }
    }

    pub(crate) fn warn(&mut self, message: String) {
        log::warn!("{}: {message}", self.label);
        self.warnings.push(message);
    }

    pub(crate) fn record_access<I: IntoIterator<Item = String>>(&mut self, ids: I) {
        self.access_log.extend(ids);
    }

    /// Accessed ids that also appear in `forbidden`.
    pub fn audit(&self, forbidden: &[String]) -> Vec<String> {
        forbidden.iter().filter(|id| self.access_log.contains(*id)).cloned().collect()
    }

    /// Per-step losses in order.
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    fn events(&self) -> Vec<Event> {
        let mut out = vec![Event::Header {
            label: self.label.clone(),
            seed: self.seed,
        }];
        // Interleave validations with steps by step index.
        let mut vals = self.validations.iter().peekable();
        for s in &self.steps {
            while let Some(v) = vals.next_if(|v| v.step <= s.step) {
                out.push(Event::Validation(v.clone()));
            }
            out.push(Event::Step(s.clone()));
        }
        out.extend(vals.map(|v| Event::Validation(v.clone())));
        out.extend(self.warnings.iter().map(|m| Event::Warning { message: m.clone() }));
        out.push(Event::Access {
            ids: self.access_log.iter().cloned().collect(),
        });
        out.push(Event::Summary {
            best_step: self.best_step,
            best_sisdri_db: self.best_sisdri_db,
            stopped_early: self.stopped_early,
        });
        out
    }

    /// Writes the trace as JSON Lines.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in self.events() {
            serde_json::to_writer(&mut w, &e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut trace = TrainTrace::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Event>(&line)? {
                Event::Header { label, seed } => {
                    trace.label = label;
                    trace.seed = seed;
                }
                Event::Step(s) => trace.steps.push(s),
                Event::Validation(v) => trace.validations.push(v),
                Event::Warning { message } => trace.warnings.push(message),
                Event::Access { ids } => trace.access_log.extend(ids),
                Event::Summary {
                    best_step,
                    best_sisdri_db,
                    stopped_early,
                } => {
                    trace.best_step = best_step;
                    trace.best_sisdri_db = best_sisdri_db;
                    trace.stopped_early = stopped_early;
                }
            }
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut t = TrainTrace::new("cm", 4);
        for step in 0..3 {
            t.steps.push(StepRecord {
                step,
                loss: -1.5 * step as f64,
                se_part: -1.0,
                contrastive_part: 0.25,
                grad_norm: 2.0,
                batch_seed: 99 + step as u64,
                degenerate_pairs: 0,
            });
        }
        t.validations.push(ValidationRecord { step: 0, sisdri_db: 0.1, loss: 3.0 });
        t.validations.push(ValidationRecord { step: 3, sisdri_db: 1.1, loss: 2.0 });
        t.record_access(["b".to_string(), "a".to_string()]);
        t.warn("degenerate pair".into());
        t.best_step = Some(3);
        t.best_sisdri_db = Some(1.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        t.save_jsonl(&path).unwrap();
        assert_eq!(TrainTrace::load_jsonl(&path).unwrap(), t);
        assert_eq!(t.audit(&["a".into(), "z".into()]), vec!["a".to_string()]);
    }
}
