//! Per-batch contribution monitoring and gradient modulation coefficients.
//!
//! Each modality's contribution is the batch sum of the true-class softmax
//! mass of its approximated uni-modal prediction. The discrepancy ratio
//! between the two sums decides which modality is dominant this step, and
//! the dominant side's gradient is scaled down by `1 - tanh(alpha * rho)`.

use crate::error::{Error, Result};
use crate::model::{unimodal_logits, FusionHead, Modality};
use crate::numkit::{softmax, Matrix};
use serde::{Deserialize, Serialize};

/// Everything one step's modulation decided, kept for traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationState {
    pub s_sum_a: f64,
    pub s_sum_v: f64,
    pub rho_a: f64,
    pub rho_v: f64,
    pub k_a: f64,
    pub k_v: f64,
    pub alpha: f64,
}

/// Batch sums of true-class softmax scores for the two uni-modal
/// predictions. Each summand lies strictly inside (0, 1), so both sums are
/// strictly between 0 and the batch size.
pub fn unimodal_scores(
    head: &FusionHead,
    f_a: &Matrix,
    f_v: &Matrix,
    labels: &[usize],
) -> Result<(f64, f64)> {
    if f_a.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if labels.len() != f_a.rows() || f_a.rows() != f_v.rows() {
        return Err(Error::Shape("labels/features batch mismatch".into()));
    }
    let classes = head.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let logits_a = unimodal_logits(head, f_a, Modality::Audio)?;
    let logits_v = unimodal_logits(head, f_v, Modality::Visual)?;
    let mut s_a = 0.0;
    let mut s_v = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        s_a += softmax(logits_a.row(r))[y];
        s_v += softmax(logits_v.row(r))[y];
    }
    Ok((s_a, s_v))
}

/// Discrepancy ratios `(rho_v, rho_a)`: `rho_v = s_v / s_a` and `rho_a` its
/// reciprocal, so `rho_a * rho_v == 1` and at most one exceeds 1.
pub fn discrepancy_ratio(s_sum_a: f64, s_sum_v: f64) -> Result<(f64, f64)> {
    if !(s_sum_a > 0.0) || !(s_sum_v > 0.0) {
        return Err(Error::Contract(format!(
            "score sums must be positive, got a={s_sum_a}, v={s_sum_v}"
        )));
    }
    let rho_v = s_sum_v / s_sum_a;
    Ok((rho_v, 1.0 / rho_v))
}

/// Modulation coefficient: `1 - tanh(alpha * rho)` when `rho > 1` (strict),
/// otherwise 1. The branch is deliberately discontinuous at `rho == 1`.
pub fn modulation_coefficient(rho_u: f64, alpha: f64) -> f64 {
    if rho_u > 1.0 {
        1.0 - (alpha * rho_u).tanh()
    } else {
        1.0
    }
}

/// Runs the full scores -> ratios -> coefficients chain for one batch.
pub fn compute(
    head: &FusionHead,
    f_a: &Matrix,
    f_v: &Matrix,
    labels: &[usize],
    alpha: f64,
) -> Result<ModulationState> {
    if alpha < 0.0 {
        return Err(Error::Contract("alpha must be non-negative".into()));
    }
    let (s_sum_a, s_sum_v) = unimodal_scores(head, f_a, f_v, labels)?;
    let (rho_v, rho_a) = discrepancy_ratio(s_sum_a, s_sum_v)?;
    Ok(ModulationState {
        s_sum_a,
        s_sum_v,
        rho_a,
        rho_v,
        k_a: modulation_coefficient(rho_a, alpha),
        k_v: modulation_coefficient(rho_v, alpha),
        alpha,
    })
}
