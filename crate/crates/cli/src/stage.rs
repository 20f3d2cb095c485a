//! Content-addressed, resumable stage outputs.
//!
//! A stage lives in `stages/<kind>/<name>-<hash>/` where the hash covers
//! every input that can change its outputs. `stage.json` is written last;
//! a directory without it is an interrupted attempt and is redone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const STAGE_FILE: &str = "stage.json";

/// Stage manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub kind: String,
    pub name: String,
    pub hash: String,
    pub inputs: Value,
    /// Stage-specific facts, e.g. derived seeds or audit results.
    pub notes: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of `kind` plus the canonical JSON of `inputs` (object keys sorted).
pub fn stage_hash(kind: &str, inputs: &Value) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(inputs).expect("JSON values always serialize"));
    hex::encode(h.finalize())
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub dir: PathBuf,
    pub record: StageRecord,
    pub reused: bool,
}

pub struct StageStore {
    root: PathBuf,
    pub executed: Vec<String>,
    pub reused: Vec<String>,
}

impl StageStore {
    pub fn new(output_dir: &Path) -> Self {
        StageStore {
            root: output_dir.join("stages"),
            executed: Vec::new(),
            reused: Vec::new(),
        }
    }

    pub fn dir_for(&self, kind: &str, name: &str, hash: &str) -> PathBuf {
        self.root.join(kind).join(format!("{name}-{}", &hash[..16]))
    }

    /// Returns the completed stage, running `produce` in a scratch
    /// directory first if needed. On failure the scratch directory is
    /// left in place for inspection.
    pub fn run<F>(&mut self, kind: &str, name: &str, inputs: Value, produce: F) -> anyhow::Result<StageOutput>
    where
        F: FnOnce(&Path) -> anyhow::Result<Value>,
    {
        let hash = stage_hash(kind, &inputs);
        let dir = self.dir_for(kind, name, &hash);
        let label = format!("{kind}/{name}");
        if let Some(record) = read_record(&dir).filter(|r| r.hash == hash) {
            log::info!("{label}: reusing {}", dir.display());
            self.reused.push(label);
            return Ok(StageOutput { dir, record, reused: true });
        }
        let mut scratch = dir.clone().into_os_string();
        scratch.push(".partial");
        let scratch = PathBuf::from(scratch);
        for d in [&dir, &scratch] {
            if d.exists() {
                fs::remove_dir_all(d).with_context(|| format!("clearing {}", d.display()))?;
            }
        }
        fs::create_dir_all(&scratch).with_context(|| format!("creating {}", scratch.display()))?;
        log::info!("{label}: running");
        let notes = produce(&scratch).with_context(|| format!("stage {label} failed (partial outputs in {})", scratch.display()))?;
        let record = StageRecord {
            kind: kind.into(),
            name: name.into(),
            hash,
            inputs,
            notes,
        };
        let path = scratch.join(STAGE_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&record)?).with_context(|| format!("writing {}", path.display()))?;
        fs::rename(&scratch, &dir).with_context(|| format!("finalizing {}", dir.display()))?;
        self.executed.push(label);
        Ok(StageOutput { dir, record, reused: false })
    }
}

fn read_record(dir: &Path) -> Option<StageRecord> {
    let raw = fs::read(dir.join(STAGE_FILE)).ok()?;
    serde_json::from_slice(&raw).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hashing_ignores_key_order() {
        let a = json!({"a": 1, "b": [1.5, "x"]});
        let b: Value = serde_json::from_str(r#"{"b": [1.5, "x"], "a": 1}"#).unwrap();
        assert_eq!(stage_hash("k", &a), stage_hash("k", &b));
        assert_ne!(stage_hash("k", &a), stage_hash("j", &a));
    }

    #[test]
    fn completed_stages_are_reused_and_failures_redone() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = StageStore::new(tmp.path());
        let out = store
            .run("demo", "x", json!({"v": 1}), |d| {
                fs::write(d.join("out.txt"), "hi")?;
                Ok(json!(null))
            })
            .unwrap();
        assert!(!out.reused);
        assert_eq!(fs::read_to_string(out.dir.join("out.txt")).unwrap(), "hi");
        let again = store.run("demo", "x", json!({"v": 1}), |_| panic!("must not rerun")).unwrap();
        assert!(again.reused);

        let err = store.run("demo", "y", json!({}), |_| anyhow::bail!("boom")).unwrap_err();
        assert!(format!("{err:#}").contains("stage demo/y"));
        let redo = store.run("demo", "y", json!({}), |_| Ok(json!(1))).unwrap();
        assert!(!redo.reused);
        assert_eq!(redo.record.notes, json!(1));
    }
}
