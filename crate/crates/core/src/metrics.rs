//! Scalar objectives: SI-SDR, SD-SDR, the negated enhancement loss and the
//! contrastive-mixture pair losses, with analytic gradients.
//!
//! All reductions are accumulated in `f64` regardless of the sample type.
//! Ratios are stabilized with [`SDR_EPS`] in numerator and denominator and
//! clamped to `±`[`SDR_CAP_DB`]; a clamped value has zero gradient.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::AudioClip;

pub const SDR_CAP_DB: f64 = 50.0;
pub const SDR_EPS: f64 = 1e-8;

const DB_PER_NEPER: f64 = 10.0 / LN_10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdrResult {
    pub value_db: f64,
    pub capped: bool,
}

impl SdrResult {
    fn clamp(raw: f64) -> Self {
        if raw > SDR_CAP_DB {
            SdrResult {
                value_db: SDR_CAP_DB,
                capped: true,
            }
        } else if raw < -SDR_CAP_DB || raw.is_nan() {
            SdrResult {
                value_db: -SDR_CAP_DB,
                capped: true,
            }
        } else {
            SdrResult {
                value_db: raw,
                capped: false,
            }
        }
    }

    fn floor() -> Self {
        SdrResult {
            value_db: -SDR_CAP_DB,
            capped: true,
        }
    }
}

/// Weights of the estimate-to-estimate regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveWeights {
    pub lambda_p: f64,
    pub lambda_n: f64,
}

impl Default for ContrastiveWeights {
    fn default() -> Self {
        ContrastiveWeights {
            lambda_p: 0.05,
            lambda_n: 0.0001,
        }
    }
}

impl ContrastiveWeights {
    pub const ZERO: ContrastiveWeights = ContrastiveWeights {
        lambda_p: 0.0,
        lambda_n: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_n >= 0.0) {
            return Err(Error::Config(format!("contrastive weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// How per-term losses combine into a batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Sum,
    /// Sum divided by the number of mixtures in the batch.
    Mean,
}

struct Moments {
    /// estimate . reference
    cross: f64,
    /// reference . reference
    ref_energy: f64,
    est_energy: f64,
}

fn moments<T: Scalar>(v: &[T], v_hat: &[T]) -> Moments {
    let mut m = Moments {
        cross: 0.0,
        ref_energy: 0.0,
        est_energy: 0.0,
    };
    for (&a, &b) in v.iter().zip(v_hat) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        m.cross += a * b;
        m.ref_energy += a * a;
        m.est_energy += b * b;
    }
    m
}

fn check_pair<T: Scalar>(v: &[T], v_hat: &[T]) -> Result<()> {
    if v.len() != v_hat.len() {
        return Err(Error::LengthMismatch {
            left: v.len(),
            right: v_hat.len(),
        });
    }
    if v.is_empty() {
        return Err(Error::InvalidAudio("empty signal".into()));
    }
    Ok(())
}

fn si_sdr_slices<T: Scalar>(v: &[T], v_hat: &[T]) -> Result<SdrResult> {
    check_pair(v, v_hat)?;
    let m = moments(v, v_hat);
    if m.ref_energy <= 0.0 {
        return Err(Error::ZeroEnergy { what: "reference" });
    }
    if m.est_energy <= 0.0 {
        return Ok(SdrResult::floor());
    }
    let alpha = m.cross / m.ref_energy;
    let residual: f64 = v
        .iter()
        .zip(v_hat)
        .map(|(&a, &b)| {
            let r = alpha * a.to_f64_lossy() - b.to_f64_lossy();
            r * r
        })
        .sum();
    let num = alpha * alpha * m.ref_energy + SDR_EPS;
    Ok(SdrResult::clamp(DB_PER_NEPER * (num / (residual + SDR_EPS)).ln()))
}

/// Scale-invariant SDR of `v_hat` against the reference `v`.
pub fn si_sdr<T: Scalar>(v: &AudioClip<T>, v_hat: &AudioClip<T>) -> Result<SdrResult> {
    si_sdr_slices(v.samples(), v_hat.samples())
}

/// SD-SDR together with its gradients w.r.t. both arguments.
struct SdTerm {
    sdr: SdrResult,
    grad_ref: Vec<f64>,
    grad_est: Vec<f64>,
}

fn sd_sdr_term<T: Scalar>(v: &[T], v_hat: &[T], with_ref_grad: bool) -> Result<SdTerm> {
    check_pair(v, v_hat)?;
    let m = moments(v, v_hat);
    if m.ref_energy <= 0.0 {
        return Err(Error::ZeroEnergy { what: "reference" });
    }
    let n = v.len();
    if m.est_energy <= 0.0 {
        return Ok(SdTerm {
            sdr: SdrResult::floor(),
            grad_ref: vec![0.0; if with_ref_grad { n } else { 0 }],
            grad_est: vec![0.0; n],
        });
    }
    let diff: f64 = v
        .iter()
        .zip(v_hat)
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    let num = m.cross * m.cross / m.ref_energy + SDR_EPS;
    let den = diff + SDR_EPS;
    let sdr = SdrResult::clamp(DB_PER_NEPER * (num / den).ln());
    if sdr.capped {
        return Ok(SdTerm {
            sdr,
            grad_ref: vec![0.0; if with_ref_grad { n } else { 0 }],
            grad_est: vec![0.0; n],
        });
    }
    // d num / d v_hat = 2 a v / e ; d den / d v_hat = 2 (v_hat - v)
    let c_num = DB_PER_NEPER * 2.0 * m.cross / (m.ref_energy * num);
    let c_den = DB_PER_NEPER * 2.0 / den;
    let grad_est = v
        .iter()
        .zip(v_hat)
        .map(|(&a, &b)| {
            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
            c_num * a - c_den * (b - a)
        })
        .collect();
    let grad_ref = if with_ref_grad {
        // d num / d v = 2 a v_hat / e - 2 a^2 v / e^2 ; d den / d v = 2 (v - v_hat)
        let c_ref = DB_PER_NEPER * 2.0 * m.cross * m.cross / (m.ref_energy * m.ref_energy * num);
        v.iter()
            .zip(v_hat)
            .map(|(&a, &b)| {
                let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
                c_num * b - c_ref * a - c_den * (a - b)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(SdTerm {
        sdr,
        grad_ref,
        grad_est,
    })
}

/// Scale-dependent SDR: like SI-SDR but the residual is `v - v_hat`.
pub fn sd_sdr<T: Scalar>(v: &AudioClip<T>, v_hat: &AudioClip<T>) -> Result<SdrResult> {
    Ok(sd_sdr_term(v.samples(), v_hat.samples(), false)?.sdr)
}

/// Enhancement loss: negated SD-SDR in dB.
pub fn se_loss<T: Scalar>(v: &AudioClip<T>, v_hat: &AudioClip<T>) -> Result<f64> {
    Ok(-sd_sdr(v, v_hat)?.value_db)
}

/// Loss value and gradient w.r.t. a single estimate.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub capped: bool,
    pub grad: Vec<T>,
}

/// [`se_loss`] and its gradient w.r.t. `v_hat`.
pub fn se_loss_grad<T: Scalar>(v: &[T], v_hat: &[T]) -> Result<LossGrad<T>> {
    let term = sd_sdr_term(v, v_hat, false)?;
    Ok(LossGrad {
        loss: -term.sdr.value_db,
        capped: term.sdr.capped,
        grad: term.grad_est.iter().map(|&g| T::from_f64_lossy(-g)).collect(),
    })
}

/// Estimate-to-estimate term. A silent reference estimate has no defined
/// ratio, so it is treated as the floor with zero gradient.
fn estimate_term<T: Scalar>(y1: &[T], y2: &[T]) -> Result<SdTerm> {
    match sd_sdr_term(y1, y2, true) {
        Err(Error::ZeroEnergy { .. }) => Ok(SdTerm {
            sdr: SdrResult::floor(),
            grad_ref: vec![0.0; y1.len()],
            grad_est: vec![0.0; y1.len()],
        }),
        other => other,
    }
}

/// Positive or negative pair loss split into its parts, with gradients
/// w.r.t. both estimates.
#[derive(Clone, Debug)]
pub struct PairLoss<T> {
    pub total: f64,
    /// Source-to-estimate terms.
    pub se_part: f64,
    /// Weighted estimate-to-estimate term.
    pub contrastive_part: f64,
    pub grad_y1: Vec<T>,
    pub grad_y2: Vec<T>,
    /// Negative pair whose pseudo-sources are indistinguishable.
    pub degenerate: bool,
}

fn to_scalar<T: Scalar>(v: &[f64], scale: f64) -> Vec<T> {
    v.iter().map(|&g| T::from_f64_lossy(g * scale)).collect()
}

/// `E(s~||y1) + E(s~||y2) + lambda_p * E(y1||y2)` for a positive pair.
pub fn positive_pair_loss<T: Scalar>(
    s_tilde: &[T],
    y1: &[T],
    y2: &[T],
    w: &ContrastiveWeights,
) -> Result<PairLoss<T>> {
    let a = sd_sdr_term(s_tilde, y1, false)?;
    let b = sd_sdr_term(s_tilde, y2, false)?;
    let c = estimate_term(y1, y2)?;
    let se_part = -a.sdr.value_db - b.sdr.value_db;
    let contrastive_part = -w.lambda_p * c.sdr.value_db;
    // E = -SDR, so every gradient flips sign.
    let grad_y1 = a
        .grad_est
        .iter()
        .zip(&c.grad_ref)
        .map(|(&g, &h)| T::from_f64_lossy(-g - w.lambda_p * h))
        .collect();
    let grad_y2 = b
        .grad_est
        .iter()
        .zip(&c.grad_est)
        .map(|(&g, &h)| T::from_f64_lossy(-g - w.lambda_p * h))
        .collect();
    Ok(PairLoss {
        total: se_part + contrastive_part,
        se_part,
        contrastive_part,
        grad_y1,
        grad_y2,
        degenerate: false,
    })
}

/// `E(s1||y1) + E(s2||y2) + lambda_n * [E(s1||s2) - E(y1||y2)]^2` for a
/// negative pair.
pub fn negative_pair_loss<T: Scalar>(
    s1: &[T],
    s2: &[T],
    y1: &[T],
    y2: &[T],
    w: &ContrastiveWeights,
) -> Result<PairLoss<T>> {
    let a = sd_sdr_term(s1, y1, false)?;
    let b = sd_sdr_term(s2, y2, false)?;
    let sources = sd_sdr_term(s1, s2, false)?;
    let degenerate = sources.sdr.capped && sources.sdr.value_db > 0.0;
    if degenerate {
        log::warn!("degenerate negative pair: pseudo-sources are indistinguishable");
    }
    let c = estimate_term(y1, y2)?;
    let gap = -sources.sdr.value_db + c.sdr.value_db;
    let se_part = -a.sdr.value_db - b.sdr.value_db;
    let contrastive_part = w.lambda_n * gap * gap;
    // d/dy [lambda (E_s - E_y)^2] = -2 lambda gap dE_y/dy = 2 lambda gap dSDR_y/dy
    let k = 2.0 * w.lambda_n * gap;
    let grad_y1 = a
        .grad_est
        .iter()
        .zip(&c.grad_ref)
        .map(|(&g, &h)| T::from_f64_lossy(-g + k * h))
        .collect();
    let grad_y2 = b
        .grad_est
        .iter()
        .zip(&c.grad_est)
        .map(|(&g, &h)| T::from_f64_lossy(-g + k * h))
        .collect();
    Ok(PairLoss {
        total: se_part + contrastive_part,
        se_part,
        contrastive_part,
        grad_y1,
        grad_y2,
        degenerate,
    })
}

/// Positive pair loss on clips.
pub fn loss_positive<T: Scalar>(
    s_tilde: &AudioClip<T>,
    y1: &AudioClip<T>,
    y2: &AudioClip<T>,
    w: &ContrastiveWeights,
) -> Result<f64> {
    Ok(positive_pair_loss(s_tilde.samples(), y1.samples(), y2.samples(), w)?.total)
}

/// Negative pair loss on clips.
pub fn loss_negative<T: Scalar>(
    s1: &AudioClip<T>,
    s2: &AudioClip<T>,
    y1: &AudioClip<T>,
    y2: &AudioClip<T>,
    w: &ContrastiveWeights,
) -> Result<f64> {
    Ok(negative_pair_loss(s1.samples(), s2.samples(), y1.samples(), y2.samples(), w)?.total)
}

/// One positive pair: shared pseudo-source and the two estimates.
#[derive(Clone, Copy, Debug)]
pub struct PositiveTerm<'a, T> {
    pub source: &'a [T],
    pub y1: &'a [T],
    pub y2: &'a [T],
}

/// One negative pair: two pseudo-sources and their estimates.
#[derive(Clone, Copy, Debug)]
pub struct NegativeTerm<'a, T> {
    pub source1: &'a [T],
    pub source2: &'a [T],
    pub y1: &'a [T],
    pub y2: &'a [T],
}

#[derive(Clone, Debug)]
pub struct CmBatchLoss<T> {
    pub total: f64,
    pub se_part: f64,
    pub contrastive_part: f64,
    /// Per positive pair: gradients w.r.t. (y1, y2), already reduced.
    pub positive_grads: Vec<(Vec<T>, Vec<T>)>,
    pub negative_grads: Vec<(Vec<T>, Vec<T>)>,
    pub degenerate_negatives: usize,
}

/// Contrastive-mixtures batch loss: sum of all positive and negative pair
/// losses (optionally divided by the number of mixtures).
pub fn loss_cm_batch<T: Scalar>(
    positives: &[PositiveTerm<'_, T>],
    negatives: &[NegativeTerm<'_, T>],
    w: &ContrastiveWeights,
    reduction: Reduction,
) -> Result<CmBatchLoss<T>> {
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::EmptySet("contrastive batch has no pairs".into()));
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / (2 * (positives.len() + negatives.len())) as f64,
    };
    let mut out = CmBatchLoss {
        total: 0.0,
        se_part: 0.0,
        contrastive_part: 0.0,
        positive_grads: Vec::with_capacity(positives.len()),
        negative_grads: Vec::with_capacity(negatives.len()),
        degenerate_negatives: 0,
    };
    let rescale = |g: Vec<T>| -> Vec<T> {
        if scale == 1.0 {
            g
        } else {
            let s = T::from_f64_lossy(scale);
            g.into_iter().map(|v| v * s).collect()
        }
    };
    for p in positives {
        let l = positive_pair_loss(p.source, p.y1, p.y2, w)?;
        out.se_part += l.se_part;
        out.contrastive_part += l.contrastive_part;
        out.positive_grads.push((rescale(l.grad_y1), rescale(l.grad_y2)));
    }
    for n in negatives {
        let l = negative_pair_loss(n.source1, n.source2, n.y1, n.y2, w)?;
        out.se_part += l.se_part;
        out.contrastive_part += l.contrastive_part;
        out.degenerate_negatives += l.degenerate as usize;
        out.negative_grads.push((rescale(l.grad_y1), rescale(l.grad_y2)));
    }
    out.se_part *= scale;
    out.contrastive_part *= scale;
    out.total = out.se_part + out.contrastive_part;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SeBatchLoss<T> {
    pub total: f64,
    pub grads: Vec<Vec<T>>,
}

/// Enhancement loss over `(target, estimate)` items.
pub fn se_batch_loss<T: Scalar>(items: &[(&[T], &[T])], reduction: Reduction) -> Result<SeBatchLoss<T>> {
    if items.is_empty() {
        return Err(Error::EmptySet("batch has no mixtures".into()));
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / items.len() as f64,
    };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(items.len());
    for (target, estimate) in items {
        let term = sd_sdr_term(target, estimate, false)?;
        total -= term.sdr.value_db;
        grads.push(to_scalar(&term.grad_est, -scale));
    }
    Ok(SeBatchLoss {
        total: total * scale,
        grads,
    })
}

/// SI-SDR improvement of the estimate `y` over the unprocessed mixture `x`.
pub fn si_sdr_improvement<T: Scalar>(s: &AudioClip<T>, x: &AudioClip<T>, y: &AudioClip<T>) -> Result<f64> {
    Ok(si_sdr(s, y)?.value_db - si_sdr(s, x)?.value_db)
}
