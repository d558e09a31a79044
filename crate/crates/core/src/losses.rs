//! Classification losses over logits with analytic gradients.
//!
//! With `p = softmax(z)` and gold class `t`:
//!
//! * cross-entropy: `-ln p_t`
//! * weighted cross-entropy: `-w_t ln p_t`
//! * focal: `-alpha_t (1 - p_t)^gamma ln p_t`
//!
//! For the focal loss, `dL/dz_k = alpha_t * (gamma (1-p_t)^(gamma-1) p_t ln p_t - (1-p_t)^gamma) * (delta_tk - p_k)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("non-finite logit at index {0}")]
    NonFinite(usize),
    #[error("empty logit vector")]
    EmptyLogits,
    #[error("target {target} out of range for {num_classes} classes")]
    BadTarget { target: u32, num_classes: usize },
    #[error("weighted cross-entropy needs {expected} finite positive weights, got {got:?}")]
    BadWeights { expected: usize, got: Vec<f64> },
    #[error("focal alpha must be in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("focal gamma must be finite and >= 0, got {0}")]
    BadGamma(f64),
    #[error("per-class alpha has {got} entries, expected {expected}")]
    AlphaLength { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {rows} logit rows but {targets} targets")]
    BatchShape { rows: usize, targets: usize },
}

/// Focal balancing factor: one value for every class or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Uniform(f64),
    PerClass(Vec<f64>),
}

impl Alpha {
    pub fn for_class(&self, t: usize) -> f64 {
        match self {
            Alpha::Uniform(a) => *a,
            Alpha::PerClass(v) => v[t],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Ce,
    WeightedCe { weights: Vec<f64> },
    Focal { alpha: Alpha, gamma: f64 },
}

impl LossSpec {
    pub fn focal(alpha: f64, gamma: f64) -> Self {
        LossSpec::Focal {
            alpha: Alpha::Uniform(alpha),
            gamma,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Ce => "ce",
            LossSpec::WeightedCe { .. } => "weighted_ce",
            LossSpec::Focal { .. } => "focal",
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), LossError> {
        match self {
            LossSpec::Ce => Ok(()),
            LossSpec::WeightedCe { weights } => {
                if weights.len() != num_classes || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(LossError::BadWeights {
                        expected: num_classes,
                        got: weights.clone(),
                    });
                }
                Ok(())
            }
            LossSpec::Focal { alpha, gamma } => {
                if !(gamma.is_finite() && *gamma >= 0.0) {
                    return Err(LossError::BadGamma(*gamma));
                }
                let check = |a: f64| {
                    if a > 0.0 && a <= 1.0 {
                        Ok(())
                    } else {
                        Err(LossError::BadAlpha(a))
                    }
                };
                match alpha {
                    Alpha::Uniform(a) => check(*a),
                    Alpha::PerClass(v) => {
                        if v.len() != num_classes {
                            return Err(LossError::AlphaLength {
                                expected: num_classes,
                                got: v.len(),
                            });
                        }
                        v.iter().try_for_each(|&a| check(a))
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Vec<f64>,
    /// Set when `p_t` fell below [`PROB_FLOOR`] and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    /// One gradient row per example, already divided by the batch size.
    pub grad_rows: Vec<Vec<f64>>,
    pub clamped: usize,
}

fn check_finite(logits: &[f64]) -> Result<(), LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyLogits);
    }
    match logits.iter().position(|z| !z.is_finite()) {
        Some(i) => Err(LossError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, LossError> {
    check_finite(logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-example loss and its gradient with respect to `logits`.
pub fn loss(spec: &LossSpec, logits: &[f64], target: u32) -> Result<LossValue, LossError> {
    check_finite(logits)?;
    let c = logits.len();
    let t = target as usize;
    if t >= c {
        return Err(LossError::BadTarget { target, num_classes: c });
    }
    spec.validate(c)?;

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    // 1 - p_t from the other classes keeps precision when p_t is near 1.
    let one_minus_pt: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != t)
        .map(|(_, e)| e)
        .sum::<f64>()
        / sum;

    let mut pt = probs[t];
    let mut log_pt = (logits[t] - max) - sum.ln();
    let clamped = pt < PROB_FLOOR;
    if clamped {
        pt = PROB_FLOOR;
        log_pt = PROB_FLOOR.ln();
    }

    // d L / d z_k = scale * (p_k - delta_tk) for every loss here.
    let (value, scale) = match spec {
        LossSpec::Ce => (-log_pt, 1.0),
        LossSpec::WeightedCe { weights } => {
            let w = weights[t];
            (-w * log_pt, w)
        }
        LossSpec::Focal { alpha, gamma } => {
            let a = alpha.for_class(t);
            let g = *gamma;
            let modulator = one_minus_pt.powf(g);
            let value = -a * modulator * log_pt;
            // dL/dp_t * p_t, with the (1-p_t)^(g-1) p_t ln p_t term taken as 0 at p_t = 1.
            let focus_term = if g == 0.0 || one_minus_pt == 0.0 {
                0.0
            } else {
                g * one_minus_pt.powf(g - 1.0) * pt * log_pt
            };
            // dL/dz_k = a * (focus_term - modulator) * (delta_tk - p_k)
            (value, -a * (focus_term - modulator))
        }
    };

    let grad_logits = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let delta = if k == t { 1.0 } else { 0.0 };
            scale * (p - delta)
        })
        .collect();

    Ok(LossValue {
        value: value.max(0.0),
        grad_logits,
        clamped,
    })
}

/// Mean loss over a batch.
pub fn batch_loss(spec: &LossSpec, logit_rows: &[Vec<f64>], targets: &[u32]) -> Result<BatchLoss, LossError> {
    if logit_rows.len() != targets.len() {
        return Err(LossError::BatchShape {
            rows: logit_rows.len(),
            targets: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut clamped = 0;
    let mut grad_rows = Vec::with_capacity(targets.len());
    for (row, &t) in logit_rows.iter().zip(targets) {
        let lv = loss(spec, row, t)?;
        total += lv.value;
        clamped += lv.clamped as usize;
        grad_rows.push(lv.grad_logits.into_iter().map(|g| g / n).collect());
    }
    Ok(BatchLoss {
        value: total / n,
        grad_rows,
        clamped,
    })
}
