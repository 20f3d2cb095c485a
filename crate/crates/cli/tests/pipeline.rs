use std::fs;
use std::path::{Path, PathBuf};

use pse_cli::config::ExperimentConfig;
use pse_cli::pipeline::{self, Stage, REPORT_DIR};
use pse_cli::scan::{scan_tree, write_scan, write_synthetic};
use pse_cli::{exit, exit_code};
use pse_core::corpus::synthetic::SyntheticSpec;
use pse_core::evaluator::{aggregate_grid, load_report, ReportFormat};
use pse_core::models::load_checkpoint;
use pse_core::signal::wav::read_wav;
use pse_core::ModelCheckpointF32;

const TINY: &str = r#"
seed = 1
test_speaker_ids = ["spk-t0", "spk-t1"]
architectures = ["gru-8"]
ft_budgets_sec = [0.0, 3.0]

[corpus]
min_eval_sec = 5.0
[corpus.synthetic]
test_speakers = 2
test_speaker_sec = 16.0
general_speakers = 2
general_speaker_sec = 8.0
noise_train = [2, 4.0]
noise_test = [1, 4.0]
noise_premix = [1, 4.0]

[pretrain]
batch_size = 4
max_steps = 4
validation_every = 2
validation_mixtures = 4

[finetune]
batch_size = 4
max_steps = 4
validation_every = 2
validation_mixtures = 4

[eval]
n_mixtures = 5
clip_sec = 0.5
"#;

fn tiny(out: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut o = vec![format!("output_dir={:?}", out.display().to_string())];
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::from_toml(TINY, Path::new("/"), &o).unwrap()
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        test_speakers: 3,
        test_speaker_sec: 60.0,
        general_speakers: 1,
        general_speaker_sec: 4.0,
        noise_train: (1, 2.0),
        noise_test: (1, 2.0),
        noise_premix: (1, 2.0),
        ..SyntheticSpec::default()
    }
}

#[test]
fn rescanning_the_synthetic_tree_reproduces_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (path, generated) = write_synthetic(&small_spec(), tmp.path()).unwrap();
    let scanned = scan_tree(tmp.path()).unwrap();
    assert_eq!(scanned, generated);
    let mut per_speaker = std::collections::BTreeMap::<String, f64>::new();
    for e in &scanned.entries {
        let clip = read_wav::<f32>(&tmp.path().join(&e.path)).unwrap();
        assert_eq!(e.duration_sec, clip.len() as f64 / clip.sample_rate() as f64);
        *per_speaker.entry(e.speaker_id.clone()).or_default() += e.duration_sec;
    }
    for spk in ["spk-t0", "spk-t1", "spk-t2"] {
        assert!(per_speaker[spk] >= 60.0 - 1e-6, "{spk}: {}", per_speaker[spk]);
    }

    // Rerunning either command yields the identical file.
    let first = fs::read(&path).unwrap();
    write_synthetic(&small_spec(), tmp.path()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
    let out = tmp.path().join("scan.jsonl");
    write_scan(tmp.path(), &out).unwrap();
    let a = fs::read(&out).unwrap();
    write_scan(tmp.path(), &out).unwrap();
    assert_eq!(fs::read(&out).unwrap(), a);
    assert_eq!(a, first);
}

#[test]
fn empty_tree_gives_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m.jsonl");
    let m = write_scan(tmp.path(), &out).unwrap();
    assert!(m.is_empty());
    assert_eq!(fs::read(&out).unwrap(), b"");
}

fn stage_dirs(out: &Path, kind: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(out.join("stages").join(kind))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

#[test]
fn runs_resume_and_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let cfg = tiny(&a, &[]);
    let first = pipeline::run(&cfg, Stage::Report).unwrap();
    assert!(first.reused.is_empty());
    for f in ["config.resolved.toml", "seeds.json", "partition.json", "report/report.json", "report/report.csv"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let frozen = ExperimentConfig::load(&a.join("config.resolved.toml"), &[]).unwrap();
    assert_eq!(frozen, cfg);

    let again = pipeline::run(&cfg, Stage::Report).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.report, first.report);

    // An interrupted finetune stage is redone; nothing upstream is.
    let victim = &stage_dirs(&a, "finetune")[0];
    fs::remove_file(victim.join("stage.json")).unwrap();
    let resumed = pipeline::run(&cfg, Stage::Report).unwrap();
    assert_eq!(resumed.executed.len(), 1);
    assert!(resumed.executed[0].starts_with("finetune/"));
    assert_eq!(resumed.report, first.report);

    // Changing finetuning settings leaves pretraining cached.
    let changed = pipeline::run(&tiny(&a, &["finetune.learning_rate=0.01"]), Stage::Report).unwrap();
    assert!(changed.executed.iter().all(|s| !s.starts_with("pretrain/") && !s.starts_with("premix/")));
    assert!(changed.executed.iter().any(|s| s.starts_with("finetune/")));

    let b = tmp.path().join("b");
    pipeline::run(&tiny(&b, &[]), Stage::Report).unwrap();
    let report = |d: &Path| fs::read(d.join(REPORT_DIR).join("report.json")).unwrap();
    let fresh = tmp.path().join("c");
    pipeline::run(&tiny(&fresh, &[]), Stage::Report).unwrap();
    assert_eq!(report(&fresh), report(&b));
}

#[test]
fn partial_pipelines_stop_where_asked() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let s = pipeline::run(&tiny(&out, &[]), Stage::Pretrain).unwrap();
    assert!(s.report.is_none());
    assert!(s.executed.iter().all(|x| !x.starts_with("finetune/")));
    assert_eq!(stage_dirs(&out, "premix").len(), 2);
    assert!(!out.join(REPORT_DIR).exists());
}

#[test]
fn multispeaker_without_finetuning_is_one_shared_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ms");
    let cfg = tiny(&out, &["schemes=[\"multispeaker\"]", "ft_budgets_sec=[0.0]"]);
    let s = pipeline::run(&cfg, Stage::Report).unwrap();
    let pre = stage_dirs(&out, "pretrain");
    assert_eq!(pre.len(), 1);
    assert!(!out.join("stages/premix").exists());
    let shared: ModelCheckpointF32 = load_checkpoint(&pre[0].join("model.ckpt")).unwrap();
    for d in stage_dirs(&out, "finetune") {
        let c: ModelCheckpointF32 = load_checkpoint(&d.join("model.ckpt")).unwrap();
        assert_eq!(c.params, shared.params);
    }
    let report = s.report.unwrap();
    assert_eq!(report.cells.len(), 1);
    let cell = &report.cells[0];
    assert_eq!((cell.key.scheme.as_str(), cell.key.ft_budget_sec, cell.n_speakers), ("multispeaker", 0.0, 2));
}

#[test]
fn merging_runs_pools_their_results() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = (1..=2)
        .map(|seed| {
            let d = tmp.path().join(format!("s{seed}"));
            pipeline::run(&tiny(&d, &[&format!("seed={seed}"), "schemes=[\"random-init\",\"cm\"]"]), Stage::Report).unwrap();
            d
        })
        .collect();
    let one = pipeline::merge_runs(&runs[..1], &tmp.path().join("m1"), &[ReportFormat::Json]).unwrap();
    assert_eq!(one, load_report(&runs[0].join("report/report.json")).unwrap());

    let ab = pipeline::merge_runs(&runs, &tmp.path().join("ab"), &ReportFormat::ALL).unwrap();
    let ba = pipeline::merge_runs(&[runs[1].clone(), runs[0].clone()], &tmp.path().join("ba"), &[ReportFormat::Json]).unwrap();
    assert_eq!(ab, ba);
    let pooled: Vec<_> = runs
        .iter()
        .flat_map(|r| load_report(&r.join("report/report.json")).unwrap().reports)
        .collect();
    assert_eq!(ab, aggregate_grid(&pooled).unwrap());
    assert!(ab.cells.iter().all(|c| c.n_seeds == 2));

    let odd = tmp.path().join("odd");
    pipeline::run(&tiny(&odd, &["eval.n_mixtures=3", "schemes=[\"random-init\"]"]), Stage::Report).unwrap();
    let err = pipeline::merge_runs(&[runs[0].clone(), odd], &tmp.path().join("x"), &[ReportFormat::Json]).unwrap_err();
    assert_eq!(exit_code(&err), exit::CONFIG);
}

#[test]
fn failures_are_stage_tagged_and_classified() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("div");
    let err = pipeline::run(&tiny(&out, &["pretrain.learning_rate=inf", "schemes=[\"multispeaker\"]"]), Stage::Report)
        .unwrap_err();
    assert_eq!(exit_code(&err), exit::DIVERGED);
    assert!(format!("{err:#}").contains("stage pretrain/gru-8-multispeaker"));
    let kept = fs::read_dir(out.join("stages/pretrain"))
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".partial"));
    assert!(kept);
    assert!(out.join("seeds.json").is_file());

    let err = pipeline::run(&tiny(&tmp.path().join("spk"), &["test_speaker_ids=[\"nobody\"]"]), Stage::Report).unwrap_err();
    assert_eq!(exit_code(&err), exit::DATA);

    let err = ExperimentConfig::from_toml(TINY, Path::new("/"), &["output_dir=\"x\"".into(), "eval.n_mixtures=0".into()]).unwrap_err();
    assert_eq!(exit_code(&err), exit::CONFIG);
}
