//! Metrics (top-1 accuracy, mean average precision), the frozen-encoder
//! linear-probe protocol, and ratio-trace summaries.

use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::model::{encoder_forward, EncoderParams, Modality, ModelParams};
use crate::modulation::ModulationState;
use crate::numkit::{gemm_tn, softmax, Matrix, Rng, Stream};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Top-1 accuracy; argmax ties break to the lowest class index.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::Contract("empty input".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape("logits/labels length mismatch".into()));
    }
    let mut hits = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Macro-averaged average precision. Per class, samples are ranked by that
/// class's score (score ties break by sample index) and precision is
/// averaged at each positive's rank, without interpolation. Classes with no
/// positive samples are skipped.
pub fn mean_average_precision(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    if scores.rows() == 0 || scores.cols() < 2 {
        return Err(Error::Contract(
            "need a nonempty batch and at least 2 classes".into(),
        ));
    }
    if scores.rows() != labels.len() {
        return Err(Error::Shape("scores/labels length mismatch".into()));
    }
    let n = scores.rows();
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    for class in 0..scores.cols() {
        let positives = labels.iter().filter(|&&y| y == class).count();
        if positives == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            scores
                .get(j, class)
                .total_cmp(&scores.get(i, class))
                .then(i.cmp(&j))
        });
        let mut seen_pos = 0usize;
        let mut ap = 0.0;
        for (rank0, &i) in order.iter().enumerate() {
            if labels[i] == class {
                seen_pos += 1;
                ap += seen_pos as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += ap / positives as f64;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Contract("no class has a positive sample".into()));
    }
    Ok(ap_sum / evaluated as f64)
}

/// Loss and accuracy of a model over one split.
pub fn evaluate(model: &ModelParams, ds: &crate::data::Dataset) -> Result<(f64, f64)> {
    let fwd = crate::model::forward(model, &ds.x_a, &ds.x_v)?;
    let loss = crate::model::cross_entropy(&fwd.logits, &ds.labels)?;
    let acc = accuracy(&fwd.logits, &ds.labels)?;
    Ok((loss, acc))
}

/// Probe training recipe: plain SGD on a fresh zero-initialized linear
/// classifier over frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 64,
            seed: 101,
        }
    }
}

/// Trains a fresh single-layer classifier on the frozen encoder's features
/// and returns test accuracy. The encoder is never touched; only the probe
/// classifier learns.
pub fn linear_probe(
    encoder: &EncoderParams,
    modality: Modality,
    splits: &DatasetSplits,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let pick = |ds: &crate::data::Dataset| match modality {
        Modality::Audio => ds.x_a.clone(),
        Modality::Visual => ds.x_v.clone(),
    };
    let (f_train, _) = encoder_forward(encoder, &pick(&splits.train))?;
    let (f_test, _) = encoder_forward(encoder, &pick(&splits.test))?;
    let classes = splits.train.classes;
    let d = f_train.cols();

    // Zero init keeps the convex probe problem fully deterministic.
    let mut w = Matrix::zeros(classes, d);
    let mut b = vec![0.0; classes];
    let mut rng = Rng::new(cfg.seed, Stream::Probe);
    let n = f_train.rows();
    let labels = &splits.train.labels;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = f_train.take_rows(chunk);
            let m = chunk.len() as f64;
            let mut dlogits = crate::numkit::gemm_nt(&xb, &w)?;
            for (bi, &i) in chunk.iter().enumerate() {
                let row = dlogits.row_mut(bi);
                for (l, bv) in row.iter_mut().zip(&b) {
                    *l += bv;
                }
                let p = softmax(row);
                row.copy_from_slice(&p);
                row[labels[i]] -= 1.0;
            }
            dlogits.scale(1.0 / m);
            let dw = gemm_tn(&dlogits, &xb)?;
            for (wv, d) in w.data_mut().iter_mut().zip(dw.data()) {
                *wv -= cfg.learning_rate * d;
            }
            for r in 0..dlogits.rows() {
                for (bv, d) in b.iter_mut().zip(dlogits.row(r)) {
                    *bv -= cfg.learning_rate * d;
                }
            }
        }
    }

    let mut logits = crate::numkit::gemm_nt(&f_test, &w)?;
    for r in 0..logits.rows() {
        for (l, bv) in logits.row_mut(r).iter_mut().zip(&b) {
            *l += bv;
        }
    }
    accuracy(&logits, &splits.test.labels)
}

/// Statistics over a ratio trace; the final window is the last 10% of
/// steps (at least one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean: f64,
    pub max: f64,
    pub final_window_mean: f64,
}

pub fn summarize_ratio_trace(trace: &[f64]) -> Result<TraceSummary> {
    if trace.is_empty() {
        return Err(Error::Contract("empty trace".into()));
    }
    let n = trace.len();
    let window = n.div_ceil(10);
    let mean = trace.iter().sum::<f64>() / n as f64;
    let max = trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let final_window_mean = trace[n - window..].iter().sum::<f64>() / window as f64;
    Ok(TraceSummary {
        mean,
        max,
        final_window_mean,
    })
}

/// Everything one training run produced. The config snapshot plus seed is
/// enough to reproduce the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_train_acc: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    pub epoch_val_acc: Vec<f64>,
    pub step_loss: Vec<f64>,
    pub step_rho_a: Vec<f64>,
    pub step_k_a: Vec<f64>,
    pub step_k_v: Vec<f64>,
    pub test_acc: f64,
    pub test_map: f64,
    pub probe_acc_a: Option<f64>,
    pub probe_acc_v: Option<f64>,
}

impl RunRecord {
    pub fn steps(&self) -> usize {
        self.step_loss.len()
    }

    /// Record one step's modulation state onto the traces.
    pub(crate) fn push_step(&mut self, loss: f64, state: &ModulationState) {
        self.step_loss.push(loss);
        self.step_rho_a.push(state.rho_a);
        self.step_k_a.push(state.k_a);
        self.step_k_v.push(state.k_v);
    }

    /// Numeric content equality, ignoring the config snapshot: true when
    /// every trace and metric is bit-for-bit identical.
    pub fn same_outputs(&self, other: &RunRecord) -> bool {
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.step_loss) == bits(&other.step_loss)
            && bits(&self.step_rho_a) == bits(&other.step_rho_a)
            && bits(&self.step_k_a) == bits(&other.step_k_a)
            && bits(&self.step_k_v) == bits(&other.step_k_v)
            && bits(&self.epoch_train_loss) == bits(&other.epoch_train_loss)
            && bits(&self.epoch_train_acc) == bits(&other.epoch_train_acc)
            && bits(&self.epoch_val_loss) == bits(&other.epoch_val_loss)
            && bits(&self.epoch_val_acc) == bits(&other.epoch_val_acc)
            && self.test_acc.to_bits() == other.test_acc.to_bits()
            && self.test_map.to_bits() == other.test_map.to_bits()
    }
}
