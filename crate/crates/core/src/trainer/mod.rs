//! Pretraining schemes, weight transfer and few-shot finetuning.
//!
//! Every scheme runs the same loop: draw the batch for step `k` from an RNG
//! seeded by `(seed, k)`, compute the loss and its gradient, clip, apply
//! Adam, and validate every `validation_every` updates on a fixed set of
//! mixtures. The weights with the best validation SI-SDRi are returned.

mod trace;

use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

pub use trace::{StepRecord, TrainTrace, ValidationRecord};

use crate::corpus::{sample_mixtures, BatchSpec, ClipSet, PremixtureSet, TrainingExample, FT_BUDGETS_SEC};
use crate::error::{Error, Result};
use crate::metrics::{loss_cm_batch, se_batch_loss, si_sdr_improvement, ContrastiveWeights, Reduction};
use crate::models::{Model, ModelCheckpoint, ModelConfig, Provenance};
use crate::nn::{clip_global_norm, Adam, ParamSet};
use crate::pairing::{build_pair_batch, PairBatch};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_for};
use crate::signal::AudioClip;

// Seed-stream tags.
const TAG_BATCH: u64 = 0x6261_7463;
const TAG_VALIDATION: u64 = 0x7661_6c69;

/// Initialization scheme of the personalized model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Multispeaker,
    Pseudose,
    Cm,
    RandomInit,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Multispeaker, Scheme::Pseudose, Scheme::Cm, Scheme::RandomInit];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Multispeaker => "multispeaker",
            Scheme::Pseudose => "pseudose",
            Scheme::Cm => "cm",
            Scheme::RandomInit => "random-init",
        }
    }

    /// Whether the scheme pretrains on the test speaker's premixtures.
    pub fn is_self_supervised(&self) -> bool {
        matches!(self, Scheme::Pseudose | Scheme::Cm)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// Mixtures per batch.
    pub batch_size: usize,
    /// Pairs per contrastive batch, half positive and half negative.
    pub pair_count: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub validation_every: usize,
    pub validation_mixtures: usize,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub contrastive: ContrastiveWeights,
    /// Only meaningful for finetuning.
    pub ft_budget_sec: Option<f64>,
    pub snr_range_db: (f64, f64),
    pub clip_sec: f64,
    pub max_grad_norm: f64,
    pub reduction: Reduction,
    /// Batches produced ahead of the optimizer on a helper thread; 0
    /// builds them inline.
    pub prefetch: usize,
}

impl TrainConfig {
    /// Defaults for `scheme` on `model`: 128 mixtures and lr 1e-3 for mask
    /// networks, 8 mixtures and lr 1e-4 for the separator.
    pub fn for_model(scheme: Scheme, model: &ModelConfig, seed: u64) -> Self {
        let batch_size = model.default_batch_size();
        TrainConfig {
            scheme,
            batch_size,
            pair_count: batch_size / 2,
            learning_rate: model.default_learning_rate(),
            max_steps: 2000,
            validation_every: 50,
            validation_mixtures: 64,
            patience: None,
            seed,
            contrastive: ContrastiveWeights::default(),
            ft_budget_sec: None,
            snr_range_db: (-5.0, 5.0),
            clip_sec: 1.0,
            max_grad_norm: 5.0,
            reduction: Reduction::Mean,
            prefetch: 0,
        }
    }

    /// Finetuning defaults: same as [`TrainConfig::for_model`] plus early
    /// stopping with patience 10.
    pub fn finetune(model: &ModelConfig, budget_sec: f64, seed: u64) -> Self {
        TrainConfig {
            patience: Some(10),
            ft_budget_sec: Some(budget_sec),
            ..Self::for_model(Scheme::Multispeaker, model, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.validation_every == 0 || self.validation_mixtures == 0 {
            return bad("batch_size, validation_every and validation_mixtures must be positive".into());
        }
        if self.pair_count == 0 || self.pair_count % 2 != 0 {
            return bad(format!("pair_count must be a positive even number, got {}", self.pair_count));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive".into());
        }
        if let Some(b) = self.ft_budget_sec {
            if !FT_BUDGETS_SEC.contains(&b) {
                return bad(format!("ft_budget_sec must be one of {FT_BUDGETS_SEC:?}, got {b}"));
            }
        }
        self.contrastive.validate()?;
        self.batch_spec(self.batch_size).validate()
    }

    fn batch_spec(&self, batch_size: usize) -> BatchSpec {
        BatchSpec {
            batch_size,
            snr_range_db: self.snr_range_db,
            clip_sec: self.clip_sec,
        }
    }

    /// Seed of the batch RNG at `step`.
    pub fn batch_seed(&self, step: usize) -> u64 {
        derive_seed(self.seed, &[TAG_BATCH, step as u64])
    }
}

/// Loss summary of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub se_part: f64,
    pub contrastive_part: f64,
    pub degenerate_pairs: usize,
}

fn forward_all<T: Scalar>(
    model: &Model<T>,
    inputs: &[&AudioClip<T>],
) -> Result<(Vec<Vec<T>>, Vec<crate::models::ForwardCache<T>>)> {
    let mut outs = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (y, c) = model.forward_train(x.samples())?;
        outs.push(y);
        caches.push(c);
    }
    Ok((outs, caches))
}

/// Enhancement loss on supervised examples; adds the gradient to `grads`.
pub fn supervised_step<T: Scalar>(
    model: &Model<T>,
    batch: &[TrainingExample<T>],
    reduction: Reduction,
    grads: &mut ParamSet<T>,
) -> Result<StepOutcome> {
    let inputs: Vec<&AudioClip<T>> = batch.iter().map(|e| &e.input).collect();
    let (outs, caches) = forward_all(model, &inputs)?;
    let items: Vec<(&[T], &[T])> = batch.iter().zip(&outs).map(|(e, y)| (e.target.samples(), y.as_slice())).collect();
    let loss = se_batch_loss(&items, reduction)?;
    for (cache, g) in caches.iter().zip(&loss.grads) {
        model.backward(cache, g, grads);
    }
    Ok(StepOutcome {
        loss: loss.total,
        se_part: loss.total,
        contrastive_part: 0.0,
        degenerate_pairs: 0,
    })
}

/// Contrastive-mixtures loss on a pair batch; adds the gradient to `grads`.
pub fn cm_step<T: Scalar>(
    model: &Model<T>,
    batch: &PairBatch<T>,
    weights: &ContrastiveWeights,
    reduction: Reduction,
    grads: &mut ParamSet<T>,
) -> Result<StepOutcome> {
    let (outs, caches) = forward_all(model, &batch.inputs())?;
    let (pos, neg) = batch.loss_terms(&outs)?;
    let loss = loss_cm_batch(&pos, &neg, weights, reduction)?;
    let flat = loss
        .positive_grads
        .iter()
        .chain(&loss.negative_grads)
        .flat_map(|(a, b)| [a, b]);
    for (cache, g) in caches.iter().zip(flat) {
        model.backward(cache, g, grads);
    }
    Ok(StepOutcome {
        loss: loss.total,
        se_part: loss.se_part,
        contrastive_part: loss.contrastive_part,
        degenerate_pairs: loss.degenerate_negatives,
    })
}

/// Fixed mixtures used for model selection.
#[derive(Clone, Debug)]
pub struct ValidationSet<T> {
    pub examples: Vec<TrainingExample<T>>,
}

impl<T: Scalar> ValidationSet<T> {
    /// `count` mixtures of `speech` with `noise`, drawn from the validation
    /// seed stream of `cfg`.
    pub fn build(speech: &ClipSet<T>, noise: &ClipSet<T>, cfg: &TrainConfig) -> Result<Self> {
        let spec = cfg.batch_spec(cfg.validation_mixtures);
        let examples = sample_mixtures(speech, noise, &spec, &mut rng_for(cfg.seed, &[TAG_VALIDATION]))?;
        Ok(ValidationSet { examples })
    }

    fn ids(&self) -> impl Iterator<Item = String> + '_ {
        self.examples
            .iter()
            .flat_map(|e| [e.target_id.clone(), e.noise_id.clone()])
    }
}

/// Mean SI-SDRi and mean enhancement loss of `model` on `val`.
pub fn validate<T: Scalar>(model: &Model<T>, val: &ValidationSet<T>) -> Result<ValidationRecord> {
    let mut sisdri = 0.0;
    let mut loss = 0.0;
    for e in &val.examples {
        let (y, _) = model.forward_train(e.input.samples())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Ok(ValidationRecord {
                step: 0,
                sisdri_db: f64::NAN,
                loss: f64::NAN,
            });
        }
        let y = AudioClip::new(y, e.input.sample_rate())?;
        sisdri += si_sdr_improvement(&e.target, &e.input, &y)?;
        loss += crate::metrics::se_loss(&e.target, &y)?;
    }
    let n = val.examples.len() as f64;
    Ok(ValidationRecord {
        step: 0,
        sisdri_db: sisdri / n,
        loss: loss / n,
    })
}

/// Splits every `every`-th item of `set` off as validation material, the
/// same rule [`PremixtureSet::split_validation`] uses. Sets too small to
/// split are used for both.
pub fn split_every<T: Scalar>(set: &ClipSet<T>, every: usize) -> (ClipSet<T>, ClipSet<T>) {
    let every = every.max(2);
    if set.len() < every {
        return (set.clone(), set.clone());
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, u) in set.items().iter().enumerate() {
        if i % every == every - 1 {
            val.push(u.clone());
        } else {
            train.push(u.clone());
        }
    }
    (ClipSet::new(train), ClipSet::new(val))
}

const VALIDATION_EVERY_ITEM: usize = 10;

fn split_premix<T: Scalar>(set: &PremixtureSet<T>) -> (ClipSet<T>, ClipSet<T>) {
    if set.len() < VALIDATION_EVERY_ITEM {
        let all = set.as_clip_set();
        return (all.clone(), all);
    }
    let (train, val) = set.split_validation(VALIDATION_EVERY_ITEM);
    (train.as_clip_set(), val.as_clip_set())
}

enum Batch<T> {
    Supervised(Vec<TrainingExample<T>>),
    Pairs(PairBatch<T>),
}

impl<T: Scalar> Batch<T> {
    fn ids(&self) -> Vec<String> {
        match self {
            Batch::Supervised(b) => b.iter().flat_map(|e| [e.target_id.clone(), e.noise_id.clone()]).collect(),
            Batch::Pairs(p) => p.source_ids().into_iter().chain(p.noise_ids()).collect(),
        }
    }
}

struct Best<T> {
    sisdri_db: f64,
    step: usize,
    params: ParamSet<T>,
}

/// The shared optimization loop. Returns the best-validation model.
fn train_loop<T, F>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    val: &ValidationSet<T>,
    trace: &mut TrainTrace,
    make_batch: F,
) -> Result<(Model<T>, usize)>
where
    T: Scalar,
    F: Fn(usize) -> Result<Batch<T>> + Sync,
{
    cfg.validate()?;
    trace.record_access(val.ids());
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut grads = model.params().zeros_like();
    let mut best: Option<Best<T>> = None;
    let mut since_best = 0usize;

    let mut run_validation = |model: &Model<T>, step: usize, trace: &mut TrainTrace| -> Result<bool> {
        let mut rec = validate(model, val)?;
        rec.step = step;
        if !rec.loss.is_finite() {
            return Err(Error::Diverged { step, loss: rec.loss });
        }
        log::debug!("{} step {step}: validation SI-SDRi {:.3} dB", trace.label, rec.sisdri_db);
        let improved = best.as_ref().is_none_or(|b| rec.sisdri_db > b.sisdri_db);
        if improved {
            best = Some(Best {
                sisdri_db: rec.sisdri_db,
                step,
                params: model.params().clone(),
            });
            since_best = 0;
        } else {
            since_best += 1;
        }
        trace.validations.push(rec);
        Ok(cfg.patience.is_some_and(|p| since_best >= p))
    };

    let mut consume = |step: usize, batch: Batch<T>, model: &mut Model<T>, trace: &mut TrainTrace| -> Result<bool> {
        if step % cfg.validation_every == 0 && run_validation(model, step, trace)? {
            trace.stopped_early = true;
            return Ok(false);
        }
        trace.record_access(batch.ids());
        grads.fill_zero();
        let out = match &batch {
            Batch::Supervised(b) => supervised_step(model, b, cfg.reduction, &mut grads)?,
            Batch::Pairs(p) => cm_step(model, p, &cfg.contrastive, cfg.reduction, &mut grads)?,
        };
        if !out.loss.is_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.max_grad_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, loss: grad_norm });
        }
        opt.update(model.params_mut(), &grads);
        if out.degenerate_pairs > 0 {
            trace.warn(format!("step {step}: {} degenerate negative pairs", out.degenerate_pairs));
        }
        trace.steps.push(StepRecord {
            step,
            loss: out.loss,
            se_part: out.se_part,
            contrastive_part: out.contrastive_part,
            grad_norm,
            batch_seed: cfg.batch_seed(step),
            degenerate_pairs: out.degenerate_pairs,
        });
        Ok(true)
    };

    let mut completed = 0usize;
    if cfg.prefetch == 0 {
        for step in 0..cfg.max_steps {
            let batch = make_batch(step)?;
            if !consume(step, batch, &mut model, trace)? {
                break;
            }
            completed = step + 1;
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel(cfg.prefetch);
            let producer = &make_batch;
            scope.spawn(move || {
                for step in 0..cfg.max_steps {
                    if tx.send(producer(step)).is_err() {
                        break;
                    }
                }
            });
            for step in 0..cfg.max_steps {
                let batch = rx.recv().expect("producer yields one batch per step")?;
                if !consume(step, batch, &mut model, trace)? {
                    break;
                }
                completed = step + 1;
            }
            Ok(())
        })?;
    }
    if !trace.stopped_early && trace.validations.last().is_none_or(|v| v.step != completed) {
        run_validation(&model, completed, trace)?;
    }
    let best = best.expect("at least one validation ran");
    trace.best_step = Some(best.step);
    trace.best_sisdri_db = Some(best.sisdri_db);
    model.params_mut().copy_from(&best.params)?;
    Ok((model, best.step))
}

fn checkpoint<T: Scalar>(
    model: &Model<T>,
    scheme: Scheme,
    cfg: &TrainConfig,
    step: usize,
    premix_snr_db: Option<f64>,
) -> ModelCheckpoint<T> {
    ModelCheckpoint::from_model(
        model,
        Provenance {
            scheme: scheme.as_str().to_string(),
            seed: cfg.seed,
            step: step as u64,
            premix_snr_db: premix_snr_db.filter(|s| s.is_finite()),
        },
        serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    )
}

fn ignore_budget(cfg: &TrainConfig, trace: &mut TrainTrace) {
    if cfg.ft_budget_sec.is_some() {
        trace.warn("ft_budget_sec is ignored during pretraining".into());
    }
}

/// Supervised pretraining on the many-speaker set `general` mixed with
/// `noise_train`.
pub fn pretrain_multispeaker<T: Scalar>(
    model: Model<T>,
    general: &ClipSet<T>,
    noise_train: &ClipSet<T>,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<ModelCheckpoint<T>> {
    ignore_budget(cfg, trace);
    if general.is_empty() {
        return Err(Error::EmptySet("multi-speaker training set".into()));
    }
    let (train, val_set) = split_every(general, VALIDATION_EVERY_ITEM);
    let val = ValidationSet::build(&val_set, noise_train, cfg)?;
    let spec = cfg.batch_spec(cfg.batch_size);
    let (model, step) = train_loop(model, cfg, &val, trace, |step| {
        sample_mixtures(&train, noise_train, &spec, &mut rng_for(cfg.batch_seed(step), &[])).map(Batch::Supervised)
    })?;
    Ok(checkpoint(&model, Scheme::Multispeaker, cfg, step, None))
}

/// Self-supervised pretraining that denoises premixtures plus injected
/// noise back to the premixtures.
pub fn pretrain_pseudose<T: Scalar>(
    model: Model<T>,
    premixtures: &PremixtureSet<T>,
    noise_train: &ClipSet<T>,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<ModelCheckpoint<T>> {
    ignore_budget(cfg, trace);
    if premixtures.is_empty() {
        return Err(Error::EmptySet("premixture set".into()));
    }
    let (train, val_set) = split_premix(premixtures);
    let val = ValidationSet::build(&val_set, noise_train, cfg)?;
    let spec = cfg.batch_spec(cfg.batch_size);
    let (model, step) = train_loop(model, cfg, &val, trace, |step| {
        sample_mixtures(&train, noise_train, &spec, &mut rng_for(cfg.batch_seed(step), &[])).map(Batch::Supervised)
    })?;
    Ok(checkpoint(&model, Scheme::Pseudose, cfg, step, Some(premixtures.config.snr_db)))
}

/// Contrastive-mixtures pretraining on positive and negative pairs built
/// from premixtures.
pub fn pretrain_cm<T: Scalar>(
    model: Model<T>,
    premixtures: &PremixtureSet<T>,
    noise_train: &ClipSet<T>,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<ModelCheckpoint<T>> {
    ignore_budget(cfg, trace);
    if premixtures.len() < 2 {
        return Err(Error::EmptySet(format!(
            "contrastive pretraining needs at least 2 premixtures, have {}",
            premixtures.len()
        )));
    }
    let (train_items, val_set) = if premixtures.len() < VALIDATION_EVERY_ITEM {
        (premixtures.clone(), premixtures.as_clip_set())
    } else {
        let (t, v) = premixtures.split_validation(VALIDATION_EVERY_ITEM);
        (t, v.as_clip_set())
    };
    let val = ValidationSet::build(&val_set, noise_train, cfg)?;
    let (model, step) = train_loop(model, cfg, &val, trace, |step| {
        build_pair_batch(
            &train_items,
            noise_train,
            cfg.pair_count / 2,
            cfg.snr_range_db,
            cfg.clip_sec,
            &mut rng_for(cfg.batch_seed(step), &[]),
        )
        .map(Batch::Pairs)
    })?;
    Ok(checkpoint(&model, Scheme::Cm, cfg, step, Some(premixtures.config.snr_db)))
}

/// Randomly initialized control, packaged as a checkpoint.
pub fn random_init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint<T>> {
    let model = Model::random(config, seed)?;
    Ok(ModelCheckpoint::from_model(
        &model,
        Provenance {
            scheme: Scheme::RandomInit.as_str().to_string(),
            seed,
            step: 0,
            premix_snr_db: None,
        },
        serde_json::Value::Null,
    ))
}

/// Few-shot supervised finetuning on the clean set `finetune_set`,
/// starting from a verbatim copy of `init`'s weights with fresh optimizer
/// state. A zero budget returns `init` unchanged.
pub fn finetune<T: Scalar>(
    init: &ModelCheckpoint<T>,
    finetune_set: &ClipSet<T>,
    noise_train: &ClipSet<T>,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<ModelCheckpoint<T>> {
    let budget = cfg
        .ft_budget_sec
        .ok_or_else(|| Error::Config("finetuning needs ft_budget_sec".into()))?;
    cfg.validate()?;
    if budget == 0.0 {
        return Ok(init.clone());
    }
    if finetune_set.is_empty() {
        return Err(Error::EmptySet(format!("finetune set for a {budget} s budget")));
    }
    let model = init.to_model()?;
    // Validation mixtures reuse the few-shot speech with fresh noise draws;
    // there is no other clean material available to this stage.
    let val = ValidationSet::build(finetune_set, noise_train, cfg)?;
    let spec = cfg.batch_spec(cfg.batch_size);
    let (model, step) = train_loop(model, cfg, &val, trace, |step| {
        sample_mixtures(finetune_set, noise_train, &spec, &mut rng_for(cfg.batch_seed(step), &[])).map(Batch::Supervised)
    })?;
    let mut out = ModelCheckpoint::from_model(&model, init.provenance.clone(), init.experiment.clone());
    out.provenance.step = step as u64;
    out.experiment = serde_json::json!({
        "pretraining": init.experiment,
        "finetune": serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    });
    Ok(out)
}

/// Trains on one fixed example and returns the SI-SDRi (dB) reached after
/// each step.
pub fn overfit_probe<T: Scalar>(
    mut model: Model<T>,
    example: &TrainingExample<T>,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(model.params(), learning_rate);
    let mut grads = model.params().zeros_like();
    let batch = std::slice::from_ref(example);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        grads.fill_zero();
        let out = supervised_step(&model, batch, Reduction::Mean, &mut grads)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        clip_global_norm(&mut grads, 5.0);
        opt.update(model.params_mut(), &grads);
        let y = model.enhance(&example.input)?;
        curve.push(si_sdr_improvement(&example.target, &example.input, &y)?);
    }
    Ok(curve)
}
