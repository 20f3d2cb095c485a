//! Building manifests from a directory tree.
//!
//! Layout: `speech/<speaker>/**.wav` for speech and
//! `noise/<train|test|premix>/**.wav` for noise. Noise recordings get the
//! speaker id `noise-<role>-<file stem>`. Anything else is skipped with a
//! warning.

use std::path::{Path, PathBuf};

use anyhow::Context;
use walkdir::WalkDir;

use pse_core::corpus::synthetic::{write_synthetic_corpus, SyntheticSpec};
use pse_core::corpus::{save_manifest, CorpusManifest, CorpusTag, ManifestEntry};
use pse_core::signal::wav::probe_wav;

fn classify(rel: &Path) -> Option<(CorpusTag, String)> {
    let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    if parts.len() < 3 {
        return None;
    }
    match parts[0].as_str() {
        "speech" => Some((CorpusTag::Speech, parts[1].clone())),
        "noise" => {
            let tag = match parts[1].as_str() {
                "train" => CorpusTag::NoiseTrain,
                "test" => CorpusTag::NoiseTest,
                "premix" => CorpusTag::NoisePremix,
                _ => return None,
            };
            let stem = rel.file_stem()?.to_string_lossy().into_owned();
            Some((tag, format!("noise-{}-{stem}", parts[1])))
        }
        _ => None,
    }
}

/// Scans `dir` and measures every WAV file. Entries are sorted by path;
/// paths are relative to `dir`.
pub fn scan_tree(dir: &Path) -> anyhow::Result<CorpusManifest> {
    if !dir.is_dir() {
        anyhow::bail!(pse_core::Error::Manifest {
            path: dir.to_path_buf(),
            errors: vec!["not a readable directory".into()],
        });
    }
    let mut entries = Vec::new();
    for item in WalkDir::new(dir).sort_by_file_name() {
        let item = item.with_context(|| format!("walking {}", dir.display()))?;
        let path = item.path();
        if !item.file_type().is_file() || path.extension().and_then(|e| e.to_str()) != Some("wav") {
            continue;
        }
        let rel = path.strip_prefix(dir).expect("walkdir yields children of its root").to_path_buf();
        let Some((corpus_tag, speaker_id)) = classify(&rel) else {
            log::warn!("skipping {}: not under speech/<speaker>/ or noise/<role>/", rel.display());
            continue;
        };
        let (frames, sample_rate) = probe_wav(path)?;
        entries.push(ManifestEntry {
            duration_sec: frames as f64 / sample_rate as f64,
            path: rel,
            speaker_id,
            sample_rate,
            corpus_tag,
        });
    }
    if entries.is_empty() {
        log::warn!("no audio found under {}; the manifest is empty", dir.display());
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(CorpusManifest::new(entries)?)
}

pub fn write_scan(dir: &Path, out: &Path) -> anyhow::Result<CorpusManifest> {
    let m = scan_tree(dir)?;
    save_manifest(&m, out)?;
    Ok(m)
}

/// Generates the synthetic corpus under `out_dir` and writes
/// `out_dir/manifest.jsonl`, sorted like a scan of the same tree.
pub fn write_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> anyhow::Result<(PathBuf, CorpusManifest)> {
    let mut m = write_synthetic_corpus(spec, out_dir)?;
    m.entries.sort_by(|a, b| a.path.cmp(&b.path));
    let path = out_dir.join("manifest.jsonl");
    save_manifest(&m, &path)?;
    Ok((path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        let c = |p: &str| classify(Path::new(p));
        assert_eq!(c("speech/alice/a/1.wav"), Some((CorpusTag::Speech, "alice".into())));
        assert_eq!(c("noise/test/n01.wav"), Some((CorpusTag::NoiseTest, "noise-test-n01".into())));
        assert_eq!(c("noise/other/n01.wav"), None);
        assert_eq!(c("speech/top.wav"), None);
        assert_eq!(c("music/x/y.wav"), None);
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let m = scan_tree(tmp.path()).unwrap();
        assert!(m.is_empty());
        assert!(scan_tree(&tmp.path().join("missing")).is_err());
    }
}
