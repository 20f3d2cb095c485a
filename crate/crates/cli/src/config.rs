//! Experiment configuration.
//!
//! One TOML file describes a run. Every key is listed below with its
//! default; unknown keys are rejected.
//!
//! ```toml
//! seed = 1                      # global training seed
//! output_dir = "runs/desk"      # relative to $PSE_OUTPUT_ROOT, else the cwd
//! test_speaker_ids = ["spk-t0", "spk-t1", "spk-t2"]
//! premix_snr_db = [10.0]        # one premixture (and SSL model) per value
//! schemes = ["random-init", "multispeaker", "pseudose", "cm"]
//! architectures = ["gru-64"]    # "gru-<hidden>" or "convtasnet"
//! ft_budgets_sec = [0.0, 3.0, 5.0, 10.0, 30.0, 60.0]
//!
//! [corpus]
//! manifest = "data/manifest.jsonl"  # relative to the config file
//! root = "data"                     # audio base dir; default: manifest's dir
//! # synthetic = { ... }            # generate a corpus instead of `manifest`
//! data_seed = 0                     # partition and premixture draws
//! min_eval_sec = 5.0
//! min_duration_sec = 1.0
//! # ft_pool_sec = 60.0              # default: largest budget
//!
//! [premix]
//! jitter_db = 0.0
//!
//! [pretrain]                    # any TrainConfig field; defaults per model
//! max_steps = 2000
//!
//! [finetune]
//! patience = 10                 # 0 disables early stopping
//!
//! [eval]
//! n_mixtures = 100
//! snr_range_db = [-5.0, 5.0]
//! clip_sec = 1.0
//! seed = 0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pse_core::corpus::synthetic::SyntheticSpec;
use pse_core::corpus::FT_BUDGETS_SEC;
use pse_core::evaluator::EvalProtocol;
use pse_core::metrics::{ContrastiveWeights, Reduction};
use pse_core::models::{MaskNetConfig, ModelConfig, SeparatorConfig};
use pse_core::trainer::{Scheme, TrainConfig};

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_ENV: &str = "PSE_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub test_speaker_ids: Vec<String>,
    #[serde(default = "default_premix_snrs")]
    pub premix_snr_db: Vec<f64>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_architectures")]
    pub architectures: Vec<String>,
    #[serde(default = "default_budgets")]
    pub ft_budgets_sec: Vec<f64>,
    #[serde(default)]
    pub premix: PremixSection,
    #[serde(default)]
    pub pretrain: TrainOverrides,
    #[serde(default)]
    pub finetune: TrainOverrides,
    #[serde(default)]
    pub eval: EvalProtocol,
}

fn default_premix_snrs() -> Vec<f64> {
    vec![10.0]
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::RandomInit, Scheme::Multispeaker, Scheme::Pseudose, Scheme::Cm]
}

fn default_architectures() -> Vec<String> {
    vec!["gru-64".into()]
}

fn default_budgets() -> Vec<f64> {
    FT_BUDGETS_SEC.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_min_eval")]
    pub min_eval_sec: f64,
    #[serde(default = "default_min_duration")]
    pub min_duration_sec: f64,
    #[serde(default)]
    pub ft_pool_sec: Option<f64>,
}

fn default_min_eval() -> f64 {
    5.0
}

fn default_min_duration() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PremixSection {
    #[serde(default)]
    pub jitter_db: f64,
}

/// Optional overrides of [`TrainConfig`] fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub batch_size: Option<usize>,
    pub pair_count: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_steps: Option<usize>,
    pub validation_every: Option<usize>,
    pub validation_mixtures: Option<usize>,
    /// 0 disables early stopping.
    pub patience: Option<usize>,
    pub lambda_p: Option<f64>,
    pub lambda_n: Option<f64>,
    pub snr_range_db: Option<(f64, f64)>,
    pub clip_sec: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub reduction: Option<Reduction>,
    pub prefetch: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
            // Keep the contrastive batch the same size unless told otherwise.
            cfg.pair_count = (v / 2).max(2) & !1;
        }
        if let Some(v) = self.pair_count {
            cfg.pair_count = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.validation_every {
            cfg.validation_every = v;
        }
        if let Some(v) = self.validation_mixtures {
            cfg.validation_mixtures = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = (v > 0).then_some(v);
        }
        let ContrastiveWeights { lambda_p, lambda_n } = cfg.contrastive;
        cfg.contrastive = ContrastiveWeights {
            lambda_p: self.lambda_p.unwrap_or(lambda_p),
            lambda_n: self.lambda_n.unwrap_or(lambda_n),
        };
        if let Some(v) = self.snr_range_db {
            cfg.snr_range_db = v;
        }
        if let Some(v) = self.clip_sec {
            cfg.clip_sec = v;
        }
        if let Some(v) = self.max_grad_norm {
            cfg.max_grad_norm = v;
        }
        if let Some(v) = self.reduction {
            cfg.reduction = v;
        }
        if let Some(v) = self.prefetch {
            cfg.prefetch = v;
        }
        cfg
    }
}

/// Parses `gru-<hidden>` or `convtasnet`.
pub fn parse_architecture(name: &str) -> anyhow::Result<ModelConfig> {
    if name == "convtasnet" {
        return Ok(ModelConfig::Separator(SeparatorConfig::default()));
    }
    let hidden = name
        .strip_prefix("gru-")
        .and_then(|h| h.parse::<usize>().ok())
        .ok_or_else(|| config_err(format!("unknown architecture {name:?}; expected gru-<hidden> or convtasnet")))?;
    let cfg = ModelConfig::MaskNet(MaskNetConfig::gru(hidden));
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

/// Applies `key.path=value` to a TOML tree. The value is parsed as TOML
/// and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let slot = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        table = slot
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses `text`, applies `overrides` and validates. Relative corpus
    /// paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("config: {e}")))?;
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        cfg.corpus.manifest = cfg.corpus.manifest.as_ref().map(abs);
        cfg.corpus.root = cfg.corpus.root.as_ref().map(abs);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    /// Output directory after applying the output-root variable.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.corpus.manifest, &self.corpus.synthetic) {
            (None, None) => return Err(config_err("corpus needs either `manifest` or `synthetic`")),
            (Some(_), Some(_)) => return Err(config_err("corpus.manifest and corpus.synthetic are exclusive")),
            _ => {}
        }
        if self.test_speaker_ids.is_empty() {
            return Err(config_err("test_speaker_ids is empty"));
        }
        if self.schemes.is_empty() || self.architectures.is_empty() || self.ft_budgets_sec.is_empty() {
            return Err(config_err("schemes, architectures and ft_budgets_sec must be non-empty"));
        }
        for b in &self.ft_budgets_sec {
            if !FT_BUDGETS_SEC.contains(b) {
                return Err(config_err(format!("ft budget {b} s is not one of {FT_BUDGETS_SEC:?}")));
            }
        }
        let needs_premix = self.schemes.iter().any(|s| s.is_self_supervised());
        if needs_premix && self.premix_snr_db.is_empty() {
            return Err(config_err("self-supervised schemes need at least one premix_snr_db"));
        }
        if self.premix_snr_db.iter().any(|s| s.is_nan()) {
            return Err(config_err("premix_snr_db contains NaN"));
        }
        if self.eval.n_mixtures == 0 {
            return Err(config_err("eval.n_mixtures must be positive"));
        }
        for arch in &self.architectures {
            let model = parse_architecture(arch)?;
            for scheme in &self.schemes {
                self.pretrain_config(&model, *scheme, 0)
                    .validate()
                    .map_err(|e| config_err(format!("[pretrain] {e}")))?;
            }
            for &b in &self.ft_budgets_sec {
                self.finetune_config(&model, b, 0)
                    .validate()
                    .map_err(|e| config_err(format!("[finetune] {e}")))?;
            }
        }
        Ok(())
    }

    pub fn pretrain_config(&self, model: &ModelConfig, scheme: Scheme, seed: u64) -> TrainConfig {
        self.pretrain.apply(TrainConfig::for_model(scheme, model, seed))
    }

    pub fn finetune_config(&self, model: &ModelConfig, budget_sec: f64, seed: u64) -> TrainConfig {
        self.finetune.apply(TrainConfig::finetune(model, budget_sec, seed))
    }

    /// Largest configured budget unless a pool size is given.
    pub fn ft_pool_sec(&self) -> f64 {
        self.corpus
            .ft_pool_sec
            .unwrap_or_else(|| self.ft_budgets_sec.iter().copied().fold(0.0, f64::max))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        output_dir = "out"
        test_speaker_ids = ["spk-t0"]
        [corpus]
        manifest = "data/manifest.jsonl"
    "#;

    #[test]
    fn defaults_and_relative_paths() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new("/cfg"), &[]).unwrap();
        assert_eq!(cfg.corpus.manifest.as_deref(), Some(Path::new("/cfg/data/manifest.jsonl")));
        assert_eq!(cfg.schemes.len(), 4);
        assert_eq!(cfg.ft_budgets_sec, FT_BUDGETS_SEC.to_vec());
        assert_eq!(cfg.ft_pool_sec(), 60.0);
        assert_eq!(cfg.eval, EvalProtocol::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::from_toml(
            MINIMAL,
            Path::new("/"),
            &["pretrain.max_steps=7".into(), "seed=9".into(), "architectures=[\"gru-128\"]".into()],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.max_steps, Some(7));
        assert_eq!(cfg.seed, 9);
        let m = parse_architecture(&cfg.architectures[0]).unwrap();
        assert_eq!(cfg.pretrain_config(&m, Scheme::Cm, 1).max_steps, 7);
        assert_eq!(cfg.finetune_config(&m, 3.0, 1).patience, Some(10));
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for o in ["ft_budgets_sec=[4.0]", "bogus=1", "architectures=[\"lstm\"]", "pretrain.pair_count=3"] {
            let err = ExperimentConfig::from_toml(MINIMAL, Path::new("/"), &[o.into()]).unwrap_err();
            assert!(err.downcast_ref::<ConfigError>().is_some(), "{o}: {err}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new("/cfg"), &[]).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere"), &[]).unwrap();
        assert_eq!(cfg, again);
    }
}
