//! End-to-end experiment driver.
//!
//! partition -> premix -> pretrain -> finetune (per budget) -> evaluate ->
//! report. Each unit of work is a content-hashed stage (see [`crate::stage`])
//! so reruns skip finished work and a pretrained model is shared by every
//! finetuning budget.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

use pse_core::corpus::{
    build_premixture, load_manifest, partition_speakers, Corpus, PartitionSpec, PremixConfig, PremixtureSet,
    SpeakerPartition,
};
use pse_core::evaluator::{
    aggregate_grid, check_noise_disjoint, emit_report, EvalReport, EvalSet, GridKey, ReportFormat, SpeakerReport,
};
use pse_core::models::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use pse_core::seed::{derive_seed, stable_hash};
use pse_core::trainer::{self, Scheme, TrainTrace};
use pse_core::ModelCheckpointF32;

use crate::config::{parse_architecture, ExperimentConfig};
use crate::scan::write_synthetic;
use crate::stage::{sha256_hex, StageOutput, StageStore};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const SEEDS_FILE: &str = "seeds.json";
pub const REPORT_DIR: &str = "report";
const CHECKPOINT: &str = "model.ckpt";
const TRACE: &str = "trace.jsonl";

/// Last stage to execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Premix,
    Pretrain,
    Finetune,
    Evaluate,
    Report,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub report: Option<EvalReport>,
    pub executed: Vec<String>,
    pub reused: Vec<String>,
}

/// A pretrained (or random) initialization.
struct Init {
    arch: String,
    scheme: Scheme,
    premix_snr_db: Option<f64>,
    /// Personalized inits belong to one speaker.
    speaker: Option<String>,
    stage: StageOutput,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    store: StageStore,
    seeds: BTreeMap<String, u64>,
    /// Identifies corpus contents plus partition settings.
    data_key: Value,
}

fn tag(x: &str) -> u64 {
    stable_hash(x)
}

fn snr_name(snr: f64) -> String {
    format!("{snr}dB")
}

fn to_json(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("config types serialize")
}

impl Run<'_> {
    fn partition(&mut self) -> anyhow::Result<SpeakerPartition<f32>> {
        let cfg = self.cfg;
        let (manifest_path, root) = match (&cfg.corpus.manifest, &cfg.corpus.synthetic) {
            (Some(m), _) => {
                let root = cfg
                    .corpus
                    .root
                    .clone()
                    .unwrap_or_else(|| m.parent().map(Path::to_path_buf).unwrap_or_default());
                (m.clone(), root)
            }
            (None, Some(spec)) => {
                let st = self.store.run("corpus", "synthetic", json!({ "synthetic": spec }), |dir| {
                    write_synthetic(spec, dir)?;
                    Ok(Value::Null)
                })?;
                (st.dir.join("manifest.jsonl"), st.dir)
            }
            (None, None) => unreachable!("validated config has a corpus source"),
        };
        let manifest = load_manifest(&manifest_path).context("stage partition")?;
        let raw = fs::read(&manifest_path).with_context(|| format!("stage partition: reading {}", manifest_path.display()))?;
        let corpus = Corpus::<f32>::load(manifest, &root, cfg.corpus.min_duration_sec).context("stage partition")?;
        let spec = PartitionSpec {
            test_speakers: cfg.test_speaker_ids.clone(),
            ft_budget_sec: cfg.ft_pool_sec(),
            ft_pool_sec: Some(cfg.ft_pool_sec()),
            min_eval_sec: cfg.corpus.min_eval_sec,
            seed: cfg.corpus.data_seed,
        };
        let p = partition_speakers(&corpus, &spec).context("stage partition")?;
        check_noise_disjoint(&p.noise_test, &[&p.noise_train, &p.noise_premix]).context("stage partition")?;
        self.data_key = json!({ "manifest_sha256": sha256_hex(&raw), "partition": spec });

        let speakers: BTreeMap<&String, Value> = p
            .speakers
            .iter()
            .map(|(id, s)| {
                let pool: Vec<&String> = s.ft_pool.iter().map(|u| &u.id).collect();
                (id, json!({ "ft_pool": pool, "ft_pool_sec": s.ft_pool_sec, "held_out": s.held_out.ids() }))
            })
            .collect();
        let record = json!({
            "key": self.data_key,
            "speakers": speakers,
            "general": p.general.ids(),
            "noise_train": p.noise_train.ids(),
            "noise_test": p.noise_test.ids(),
            "noise_premix": p.noise_premix.ids(),
        });
        let path = self.out.join("partition.json");
        fs::write(&path, serde_json::to_vec_pretty(&record)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(p)
    }

    fn premixtures(&mut self, p: &SpeakerPartition<f32>) -> anyhow::Result<BTreeMap<(String, u64), (PremixtureSet<f32>, String)>> {
        let mut out = BTreeMap::new();
        if !self.cfg.schemes.iter().any(|s| s.is_self_supervised()) {
            return Ok(out);
        }
        for spk in &self.cfg.test_speaker_ids {
            let speaker = p.speaker(spk).context("stage premix")?;
            for &snr in &self.cfg.premix_snr_db {
                let pc = PremixConfig {
                    snr_db: snr,
                    jitter_db: self.cfg.premix.jitter_db,
                    seed: derive_seed(self.cfg.corpus.data_seed, &[tag("premix"), tag(spk), snr.to_bits()]),
                };
                let name = format!("{spk}-{}", snr_name(snr));
                self.seeds.insert(format!("premix/{name}"), pc.seed);
                let inputs = json!({ "data": self.data_key, "speaker": spk, "premix": pc });
                let st = self.store.run("premix", &name, inputs, |dir| {
                    build_premixture(spk, &speaker.held_out, &p.noise_premix, &pc)?.save(dir)?;
                    Ok(Value::Null)
                })?;
                let set = PremixtureSet::load(&st.dir).with_context(|| format!("stage premix/{name}: loading"))?;
                out.insert((spk.clone(), snr.to_bits()), (set, st.record.hash));
            }
        }
        Ok(out)
    }

    fn pretrain_all(
        &mut self,
        p: &SpeakerPartition<f32>,
        premix: &BTreeMap<(String, u64), (PremixtureSet<f32>, String)>,
    ) -> anyhow::Result<Vec<Init>> {
        let cfg = self.cfg;
        // Every test-speaker recording, for the multi-speaker audit.
        let test_audio: Vec<String> = p
            .speakers
            .values()
            .flat_map(|s| s.held_out.ids().into_iter().chain(s.ft_pool.iter().map(|u| u.id.clone())))
            .collect();
        let mut inits = Vec::new();
        for arch in &cfg.architectures {
            let model_cfg = parse_architecture(arch)?;
            let init_seed = derive_seed(cfg.seed, &[tag("init"), tag(arch)]);
            self.seeds.insert(format!("init/{arch}"), init_seed);
            for &scheme in &cfg.schemes {
                match scheme {
                    Scheme::RandomInit | Scheme::Multispeaker => {
                        let init = self.pretrain_one(&model_cfg, arch, scheme, init_seed, None, p, &test_audio)?;
                        inits.push(init);
                    }
                    Scheme::Pseudose | Scheme::Cm => {
                        for spk in &cfg.test_speaker_ids {
                            for &snr in &cfg.premix_snr_db {
                                let (set, hash) = &premix[&(spk.clone(), snr.to_bits())];
                                let speaker = p.speaker(spk)?;
                                let mut forbidden = speaker.held_out.ids();
                                forbidden.extend(speaker.ft_pool.iter().map(|u| u.id.clone()));
                                let ssl = Some((spk.as_str(), snr, set, hash.as_str()));
                                let init = self.pretrain_one(&model_cfg, arch, scheme, init_seed, ssl, p, &forbidden)?;
                                inits.push(init);
                            }
                        }
                    }
                }
            }
        }
        Ok(inits)
    }

    #[allow(clippy::too_many_arguments)]
    fn pretrain_one(
        &mut self,
        model_cfg: &ModelConfig,
        arch: &str,
        scheme: Scheme,
        init_seed: u64,
        ssl: Option<(&str, f64, &PremixtureSet<f32>, &str)>,
        p: &SpeakerPartition<f32>,
        forbidden: &[String],
    ) -> anyhow::Result<Init> {
        let cfg = self.cfg;
        let speaker = ssl.map(|s| s.0);
        let snr = ssl.map(|s| s.1);
        let name = match ssl {
            Some((spk, snr, ..)) => format!("{arch}-{scheme}-{spk}-{}", snr_name(snr)),
            None => format!("{arch}-{scheme}"),
        };
        let train_seed = derive_seed(
            cfg.seed,
            &[tag("pretrain"), tag(arch), tag(scheme.as_str()), tag(speaker.unwrap_or("")), snr.unwrap_or(0.0).to_bits()],
        );
        let tc = cfg.pretrain_config(model_cfg, scheme, train_seed);
        self.seeds.insert(format!("pretrain/{name}"), train_seed);
        let inputs = json!({
            "data": self.data_key,
            "model": model_cfg,
            "init_seed": init_seed,
            "train": if scheme == Scheme::RandomInit { Value::Null } else { to_json(&tc) },
            "premix": ssl.map(|s| s.3),
        });
        let stage = self.store.run("pretrain", &name, inputs, |dir| {
            let mut trace = TrainTrace::new(name.clone(), train_seed);
            let model = || Model::<f32>::random(model_cfg, init_seed);
            let ckpt: ModelCheckpointF32 = match (scheme, ssl) {
                (Scheme::RandomInit, _) => trainer::random_init(model_cfg, init_seed)?,
                (Scheme::Multispeaker, _) => trainer::pretrain_multispeaker(model()?, &p.general, &p.noise_train, &tc, &mut trace)?,
                (Scheme::Pseudose, Some((_, _, set, _))) => trainer::pretrain_pseudose(model()?, set, &p.noise_train, &tc, &mut trace)?,
                (Scheme::Cm, Some((_, _, set, _))) => trainer::pretrain_cm(model()?, set, &p.noise_train, &tc, &mut trace)?,
                _ => unreachable!("self-supervised schemes always carry a premixture"),
            };
            let violations = trace.audit(forbidden);
            if !violations.is_empty() {
                anyhow::bail!("privacy audit failed: pretraining read {violations:?}");
            }
            save_checkpoint(&ckpt, &dir.join(CHECKPOINT))?;
            trace.save_jsonl(&dir.join(TRACE))?;
            Ok(json!({
                "audit": { "forbidden_ids": forbidden.len(), "violations": violations },
                "best_step": trace.best_step,
                "best_val_sisdri_db": trace.best_sisdri_db,
                "warnings": trace.warnings,
            }))
        })?;
        Ok(Init {
            arch: arch.to_string(),
            scheme,
            premix_snr_db: snr,
            speaker: speaker.map(str::to_string),
            stage,
        })
    }

    fn finetune_all(&mut self, p: &SpeakerPartition<f32>, inits: &[Init]) -> anyhow::Result<Vec<(GridKey, String, StageOutput)>> {
        let cfg = self.cfg;
        let mut out = Vec::new();
        for init in inits {
            let model_cfg = parse_architecture(&init.arch)?;
            let ckpt: ModelCheckpointF32 = load_checkpoint(&init.stage.dir.join(CHECKPOINT))
                .with_context(|| format!("stage finetune: loading {}", init.stage.dir.display()))?;
            let speakers = match &init.speaker {
                Some(s) => vec![s.clone()],
                None => cfg.test_speaker_ids.clone(),
            };
            for spk in &speakers {
                for &budget in &cfg.ft_budgets_sec {
                    let snr = init.premix_snr_db.map(|s| format!("-{}", snr_name(s))).unwrap_or_default();
                    let name = format!("{}-{}{snr}-{spk}-{budget}s", init.arch, init.scheme);
                    // Shared by every init so schemes see the same batches.
                    let seed = derive_seed(cfg.seed, &[tag("finetune"), tag(&init.arch), tag(spk), budget.to_bits()]);
                    let tc = cfg.finetune_config(&model_cfg, budget, seed);
                    self.seeds.insert(format!("finetune/{name}"), seed);
                    let inputs = json!({
                        "data": self.data_key,
                        "init": init.stage.record.hash,
                        "speaker": spk,
                        "train": tc,
                    });
                    let stage = self.store.run("finetune", &name, inputs, |dir| {
                        let speaker = p.speaker(spk)?.with_ft_budget(budget)?;
                        let mut trace = TrainTrace::new(name.clone(), seed);
                        let tuned = trainer::finetune(&ckpt, &speaker.finetune, &p.noise_train, &tc, &mut trace)?;
                        save_checkpoint(&tuned, &dir.join(CHECKPOINT))?;
                        trace.save_jsonl(&dir.join(TRACE))?;
                        Ok(json!({
                            "finetune_ids": speaker.finetune.ids(),
                            "best_step": trace.best_step,
                            "stopped_early": trace.stopped_early,
                        }))
                    })?;
                    let key = GridKey {
                        architecture: init.arch.clone(),
                        scheme: init.scheme.as_str().to_string(),
                        premix_snr_db: init.premix_snr_db,
                        ft_budget_sec: budget,
                    };
                    out.push((key, spk.clone(), stage));
                }
            }
        }
        Ok(out)
    }

    fn evaluate_all(
        &mut self,
        p: &SpeakerPartition<f32>,
        tuned: &[(GridKey, String, StageOutput)],
    ) -> anyhow::Result<Vec<SpeakerReport>> {
        let cfg = self.cfg;
        let mut sets: HashMap<String, EvalSet<f32>> = HashMap::new();
        let mut reports = Vec::new();
        for (key, spk, ft) in tuned {
            let name = ft.record.name.clone();
            let inputs = json!({ "data": self.data_key, "model": ft.record.hash, "protocol": cfg.eval });
            let stage = self.store.run("evaluate", &name, inputs, |dir| {
                if !sets.contains_key(spk) {
                    let held_out = &p.speaker(spk)?.held_out;
                    sets.insert(spk.clone(), EvalSet::build(spk, held_out, &p.noise_test, &cfg.eval)?);
                }
                let ckpt: ModelCheckpointF32 = load_checkpoint(&ft.dir.join(CHECKPOINT))?;
                let stats = sets[spk].score(&ckpt.to_model()?)?;
                let report = SpeakerReport {
                    speaker_id: spk.clone(),
                    train_seed: cfg.seed,
                    key: key.clone(),
                    protocol: cfg.eval,
                    stats,
                };
                fs::write(dir.join("result.json"), serde_json::to_vec_pretty(&report)?)?;
                Ok(Value::Null)
            })?;
            let raw = fs::read(stage.dir.join("result.json"))?;
            reports.push(serde_json::from_slice(&raw).with_context(|| format!("stage evaluate/{name}: result.json"))?);
        }
        Ok(reports)
    }

    fn write_seeds(&self) -> anyhow::Result<()> {
        let path = self.out.join(SEEDS_FILE);
        let doc = json!({ "global": self.cfg.seed, "data": self.cfg.corpus.data_seed, "eval": self.cfg.eval.seed, "derived": self.seeds });
        fs::write(&path, serde_json::to_vec_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))
    }
}

/// Runs every stage up to and including `until`.
pub fn run(cfg: &ExperimentConfig, until: Stage) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let frozen = out.join(RESOLVED_CONFIG);
    fs::write(&frozen, cfg.to_toml()).with_context(|| format!("writing {}", frozen.display()))?;

    let mut run = Run {
        cfg,
        store: StageStore::new(&out),
        out: out.clone(),
        seeds: BTreeMap::new(),
        data_key: Value::Null,
    };
    let result = (|| -> anyhow::Result<Option<EvalReport>> {
        let p = run.partition()?;
        let premix = run.premixtures(&p)?;
        if until == Stage::Premix {
            return Ok(None);
        }
        let inits = run.pretrain_all(&p, &premix)?;
        if until == Stage::Pretrain {
            return Ok(None);
        }
        let tuned = run.finetune_all(&p, &inits)?;
        if until == Stage::Finetune {
            return Ok(None);
        }
        let reports = run.evaluate_all(&p, &tuned)?;
        if until == Stage::Evaluate {
            return Ok(None);
        }
        let grid = aggregate_grid(&reports).context("stage report")?;
        emit_report(&grid, &out.join(REPORT_DIR), &ReportFormat::ALL).context("stage report")?;
        Ok(Some(grid))
    })();
    run.write_seeds()?;
    let report = result?;
    Ok(RunSummary {
        output_dir: out,
        report,
        executed: run.store.executed,
        reused: run.store.reused,
    })
}

/// Report file of a run directory, or `path` itself if it is a file.
pub fn report_path(path: &Path) -> PathBuf {
    if path.is_file() {
        path.to_path_buf()
    } else {
        path.join(REPORT_DIR).join("report.json")
    }
}

/// Merges the reports of finished runs and writes the combined grid.
pub fn merge_runs(runs: &[PathBuf], out_dir: &Path, formats: &[ReportFormat]) -> anyhow::Result<EvalReport> {
    let reports = runs
        .iter()
        .map(|r| {
            let path = report_path(r);
            pse_core::evaluator::load_report(&path).with_context(|| format!("loading {}", path.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let merged = pse_core::evaluator::merge_reports(&reports)?;
    emit_report(&merged, out_dir, formats)?;
    Ok(merged)
}
