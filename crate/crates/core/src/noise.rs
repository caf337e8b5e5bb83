//! Mini-batch gradient noise: a diagonal estimate of its covariance and
//! matched Gaussian samples for generalization enhancement.
//!
//! The estimate is the single-batch form: per entry,
//! `(1/m) * (mean_i g_i^2 - gbar^2)`, with the current batch mean standing
//! in for the population gradient, refreshed every step. Sampling is
//! entrywise independent with the matched per-entry variance.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numkit::Rng;

/// Diagonal variance estimate, one entry per parameter entry.
#[derive(Debug, Clone)]
pub struct NoiseEstimate {
    /// Per-entry variances, parameter-shaped.
    pub var: ModelParams,
    /// Batch size the estimate was computed from.
    pub batch: usize,
}

/// Diagonal covariance of the mini-batch gradient from a per-sample
/// gradient stack and its mean. Cancellation can push the raw estimate a
/// hair below zero; it is clamped.
pub fn estimate_covariance_diag(
    per_sample: &[ModelParams],
    mean_grad: &ModelParams,
    m: usize,
) -> Result<NoiseEstimate> {
    if m < 2 {
        return Err(Error::Contract(format!(
            "variance estimate needs a batch of at least 2, got {m}"
        )));
    }
    if per_sample.len() != m {
        return Err(Error::Shape(format!(
            "per-sample stack has {} entries for batch {m}",
            per_sample.len()
        )));
    }
    let mut var = mean_grad.zeros_like();
    {
        let mut slots = var.tensors_mut();
        let mean_slots = mean_grad.tensors();
        for sample in per_sample {
            let s = sample.tensors();
            for (ti, slot) in slots.iter_mut().enumerate() {
                if s[ti].data.len() != slot.data.len() {
                    return Err(Error::Shape(format!(
                        "per-sample tensor {} shape differs from mean",
                        s[ti].name
                    )));
                }
                for (acc, &g) in slot.data.iter_mut().zip(s[ti].data) {
                    *acc += g * g;
                }
            }
        }
        let m_f = m as f64;
        for (ti, slot) in slots.iter_mut().enumerate() {
            for (acc, &gbar) in slot.data.iter_mut().zip(mean_slots[ti].data) {
                *acc = ((*acc / m_f - gbar * gbar) / m_f).max(0.0);
            }
        }
    }
    Ok(NoiseEstimate { var, batch: m })
}

/// One fresh Gaussian draw per parameter entry, zero mean, variance from
/// the estimate.
pub fn sample_ge_noise(estimate: &NoiseEstimate, rng: &mut Rng) -> ModelParams {
    let mut noise = estimate.var.zeros_like();
    let var_slots = estimate.var.tensors();
    for (ti, slot) in noise.tensors_mut().iter_mut().enumerate() {
        for (n, &v) in slot.data.iter_mut().zip(var_slots[ti].data) {
            *n = v.sqrt() * rng.standard_normal();
        }
    }
    noise
}

/// Predicted per-entry variance of the modulated-plus-enhanced update
/// noise, `(k^2 + 1) * var`. Test instrumentation for the recovery
/// identity; not used by the update itself.
pub fn combined_update_variance(k: f64, estimate: &NoiseEstimate) -> Result<ModelParams> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Contract(format!("k must be in (0, 1], got {k}")));
    }
    let mut out = estimate.var.clone();
    let factor = k * k + 1.0;
    for slot in out.tensors_mut() {
        for v in slot.data.iter_mut() {
            *v *= factor;
        }
    }
    Ok(out)
}

/// Noise intensity of a training setting: learning rate over batch size.
/// Orders experimental settings; larger means noisier updates.
pub fn noise_intensity(learning_rate: f64, batch_size: usize) -> Result<f64> {
    if !(learning_rate > 0.0) || batch_size == 0 {
        return Err(Error::Contract(
            "noise intensity needs positive learning rate and batch size".into(),
        ));
    }
    Ok(learning_rate / batch_size as f64)
}
