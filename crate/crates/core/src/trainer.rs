//! The training loop: per-step contribution monitoring, gradient
//! modulation, matched-noise injection, and SGD/Adam parameter updates.
//!
//! Strategy lattice: `joint` is plain mini-batch training; `ogm` scales the
//! dominant modality's gradients by its coefficient; `ogm_ge` additionally
//! injects Gaussian noise with the estimated per-entry gradient variance.
//! With `alpha = 0` and noise disabled all three collapse to the same
//! bitwise-identical run, which the tests pin down.

use crate::data::{minibatches, Dataset, DatasetSplits, MultimodalBatch};
use crate::error::{Error, Result};
use crate::eval::{accuracy, evaluate, mean_average_precision, RunRecord};
use crate::model::{
    backward, forward, cross_entropy, Modality, ModelArch, ModelParams, FusionMode, TensorRole,
};
use crate::modulation::{self, ModulationState};
use crate::noise::{estimate_covariance_diag, sample_ge_noise};
use crate::numkit::{softmax, Matrix, Rng, Stream};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Joint,
    Ogm,
    OgmGe,
    ModalityDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Full training recipe. Defaults follow the standard recipe this lab
/// mirrors: SGD with momentum 0.9, weight decay 1e-4, learning rate 1e-3
/// decayed by 0.1 every 70 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub fusion: FusionMode,
    /// Modulation strength; 0 disables modulation.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional hard cap on optimization steps (for step-exact experiments).
    pub max_steps: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Decay period in epochs; 0 disables the schedule.
    pub lr_decay_every: usize,
    /// Per-sample probability of zeroing `drop_modality` under the
    /// modality-dropout strategy.
    pub dropout_p: f64,
    pub drop_modality: Modality,
    pub optimizer: OptimKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Scale the dominant modality's classifier block along with its
    /// encoder (the shared bias is never modulated). Off = encoder-only.
    pub modulate_head: bool,
    /// Noise injection under `ogm_ge`; off collapses it to `ogm`.
    pub ge_enabled: bool,
    /// Train a uni-modal reference model: the other modality's features are
    /// zeroed in every split before training.
    pub unimodal: Option<Modality>,
    /// Hidden widths of each encoder, ending with its feature dim.
    pub hidden_a: Vec<usize>,
    pub hidden_v: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Joint,
            fusion: FusionMode::Concatenation,
            alpha: 0.1,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 60,
            max_steps: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 70,
            dropout_p: 0.5,
            drop_modality: Modality::Audio,
            optimizer: OptimKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            modulate_head: true,
            ge_enabled: true,
            unimodal: None,
            hidden_a: vec![16, 8],
            hidden_v: vec![16, 8],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if self.hidden_a.is_empty() || self.hidden_v.is_empty() {
            return Err(Error::Config("encoders need at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Network shape for a dataset: input dims from the data, hidden chain
    /// from the config.
    pub fn arch(&self, ds: &Dataset) -> ModelArch {
        let chain = |d_in: usize, hidden: &[usize]| {
            let mut dims = Vec::with_capacity(hidden.len() + 1);
            dims.push(d_in);
            dims.extend_from_slice(hidden);
            dims
        };
        ModelArch {
            dims_a: chain(ds.dim_a(), &self.hidden_a),
            dims_v: chain(ds.dim_v(), &self.hidden_v),
            classes: ds.classes,
            fusion: self.fusion,
        }
    }

    fn modulation_alpha(&self) -> f64 {
        match self.strategy {
            Strategy::Ogm | Strategy::OgmGe => self.alpha,
            Strategy::Joint | Strategy::ModalityDropout => 0.0,
        }
    }

    fn noise_active(&self) -> bool {
        self.strategy == Strategy::OgmGe && self.ge_enabled
    }

    fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Momentum buffers (SGD) or moment estimates and step counter (Adam),
/// one flat buffer per tensor in canonical order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimKind,
    momentum_buf: Vec<Vec<f64>>,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(model: &ModelParams, kind: OptimKind) -> Self {
        let shapes: Vec<Vec<f64>> = model
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        match kind {
            OptimKind::Sgd => Self {
                kind,
                momentum_buf: shapes,
                adam_m: Vec::new(),
                adam_v: Vec::new(),
                step: 0,
            },
            OptimKind::Adam => Self {
                kind,
                momentum_buf: Vec::new(),
                adam_m: shapes.clone(),
                adam_v: shapes,
                step: 0,
            },
        }
    }
}

/// One SGD-with-momentum update on a flat tensor. Weight decay joins the
/// raw gradient first, then modulation and noise, then the momentum buffer.
#[allow(clippy::too_many_arguments)]
pub fn sgd_update(
    tensor: &mut [f64],
    grad: &[f64],
    k: f64,
    h: Option<&[f64]>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    buf: &mut [f64],
) -> Result<()> {
    if grad.len() != tensor.len() || buf.len() != tensor.len() {
        return Err(Error::Shape("sgd_update: length mismatch".into()));
    }
    if let Some(h) = h {
        if h.len() != tensor.len() {
            return Err(Error::Shape("sgd_update: noise length mismatch".into()));
        }
    }
    for i in 0..tensor.len() {
        let mut g = k * (grad[i] + weight_decay * tensor[i]);
        if let Some(h) = h {
            g += h[i];
        }
        buf[i] = momentum * buf[i] + g;
        tensor[i] -= lr * buf[i];
    }
    Ok(())
}

/// One Adam update; the effective gradient `k*grad + h` feeds the moment
/// estimates, with standard bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    tensor: &mut [f64],
    grad: &[f64],
    k: f64,
    h: Option<&[f64]>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
) -> Result<()> {
    if grad.len() != tensor.len() || m.len() != tensor.len() || v.len() != tensor.len() {
        return Err(Error::Shape("adam_update: length mismatch".into()));
    }
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..tensor.len() {
        let mut g = k * grad[i];
        if let Some(h) = h {
            g += h[i];
        }
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        tensor[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Per-sample zeroing of one modality's features with probability `p`;
/// labels are untouched.
pub fn apply_modality_dropout(
    batch: &MultimodalBatch,
    modality: Modality,
    p: f64,
    rng: &mut Rng,
) -> Result<MultimodalBatch> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract("dropout probability must be in [0, 1]".into()));
    }
    let mut out = batch.clone();
    let target = match modality {
        Modality::Audio => &mut out.x_a,
        Modality::Visual => &mut out.x_v,
    };
    for r in 0..target.rows() {
        if rng.uniform() < p {
            target.row_mut(r).fill(0.0);
        }
    }
    Ok(out)
}

/// The RNG streams a run owns. Splitting per consumer keeps strategies
/// bitwise comparable: a strategy that never draws noise leaves the noise
/// stream untouched instead of shifting every other consumer.
#[derive(Debug, Clone)]
pub struct Streams {
    pub data: Rng,
    pub noise: Rng,
    pub dropout: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: Rng::new(seed, Stream::Data),
            noise: Rng::new(seed, Stream::Noise),
            dropout: Rng::new(seed, Stream::Dropout),
        }
    }
}

/// What one optimization step produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub batch_acc: f64,
    pub modulation: ModulationState,
}

/// One full iteration: forward, contribution monitoring, coefficients,
/// backward, optional covariance-matched noise, parameter update.
pub fn train_step(
    model: &mut ModelParams,
    batch: &MultimodalBatch,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    streams: &mut Streams,
    lr: f64,
    step_idx: usize,
) -> Result<StepOutput> {
    let effective;
    let batch = if cfg.strategy == Strategy::ModalityDropout && cfg.dropout_p > 0.0 {
        effective = apply_modality_dropout(batch, cfg.drop_modality, cfg.dropout_p, &mut streams.dropout)?;
        &effective
    } else {
        batch
    };

    let fwd = forward(model, &batch.x_a, &batch.x_v)?;
    let loss = cross_entropy(&fwd.logits, &batch.labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
            step: step_idx,
        });
    }
    let batch_acc = accuracy(&fwd.logits, &batch.labels)?;

    // Contribution scores come from the same forward pass as the loss.
    let modstate = modulation::compute(
        &model.head,
        &fwd.f_a,
        &fwd.f_v,
        &batch.labels,
        cfg.modulation_alpha(),
    )?;

    let ge = cfg.noise_active();
    let bundle = backward(model, &fwd, &batch.labels, ge)?;
    if let Some(name) = bundle.mean.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: name,
            step: step_idx,
        });
    }

    let noise = if ge {
        let stack = bundle.per_sample.as_ref().expect("per-sample grads requested");
        let est = estimate_covariance_diag(stack, &bundle.mean, bundle.batch)?;
        Some(sample_ge_noise(&est, &mut streams.noise))
    } else {
        None
    };

    opt.step += 1;
    let t = opt.step;
    let grads = bundle.mean.tensors();
    let noise_slots = noise.as_ref().map(|n| n.tensors());
    let mut params = model.tensors_mut();
    for (ti, slot) in params.iter_mut().enumerate() {
        let k = match slot.role.modality() {
            Some(m) => {
                if slot.role.is_encoder() || cfg.modulate_head {
                    match m {
                        Modality::Audio => modstate.k_a,
                        Modality::Visual => modstate.k_v,
                    }
                } else {
                    1.0
                }
            }
            // The shared bias belongs to no modality; never modulated.
            None => 1.0,
        };
        let h = match (&noise_slots, slot.role) {
            (Some(slots), role) if role.modality().is_some() => Some(slots[ti].data),
            _ => None,
        };
        match opt.kind {
            OptimKind::Sgd => sgd_update(
                slot.data,
                grads[ti].data,
                k,
                h,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                &mut opt.momentum_buf[ti],
            )?,
            OptimKind::Adam => {
                // Weight decay joins the raw gradient before modulation,
                // matching the SGD ordering.
                let g_wd: Vec<f64> = grads[ti]
                    .data
                    .iter()
                    .zip(slot.data.iter())
                    .map(|(g, p)| g + cfg.weight_decay * p)
                    .collect();
                adam_update(
                    slot.data,
                    &g_wd,
                    k,
                    h,
                    lr,
                    (cfg.adam_beta1, cfg.adam_beta2),
                    cfg.adam_eps,
                    &mut opt.adam_m[ti],
                    &mut opt.adam_v[ti],
                    t,
                )?
            }
        }
        if slot.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                tensor: slot.name.clone(),
                step: step_idx,
            });
        }
    }

    Ok(StepOutput {
        loss,
        batch_acc,
        modulation: modstate,
    })
}

/// Per-sample softmax probabilities, the cross-sample-comparable scores
/// used for average precision.
fn class_probabilities(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let p = softmax(out.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

/// Runs the full loop over the splits and returns the trained model with
/// its run record. Deterministic given the config (including seed).
pub fn train(splits: &DatasetSplits, cfg: &TrainConfig) -> Result<(ModelParams, RunRecord)> {
    cfg.validate()?;
    let silenced;
    let splits = match cfg.unimodal {
        Some(Modality::Audio) => {
            silenced = splits.silence_modality(Modality::Visual);
            &silenced
        }
        Some(Modality::Visual) => {
            silenced = splits.silence_modality(Modality::Audio);
            &silenced
        }
        None => splits,
    };

    let mut init_rng = Rng::new(cfg.seed, Stream::Init);
    let mut model = ModelParams::init(&cfg.arch(&splits.train), &mut init_rng)?;
    let mut opt = OptimizerState::new(&model, cfg.optimizer);
    let mut streams = Streams::new(cfg.seed);

    let mut record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        epoch_train_loss: Vec::new(),
        epoch_train_acc: Vec::new(),
        epoch_val_loss: Vec::new(),
        epoch_val_acc: Vec::new(),
        step_loss: Vec::new(),
        step_rho_a: Vec::new(),
        step_k_a: Vec::new(),
        step_k_v: Vec::new(),
        test_acc: 0.0,
        test_map: 0.0,
        probe_acc_a: None,
        probe_acc_v: None,
    };

    let mut steps_done = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let batches = minibatches(&splits.train, cfg.batch_size, &mut streams.data)?;
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            if cfg.max_steps.is_some_and(|cap| steps_done >= cap) {
                break;
            }
            let out = train_step(&mut model, batch, cfg, &mut opt, &mut streams, lr, steps_done)?;
            record.push_step(out.loss, &out.modulation);
            loss_sum += out.loss;
            acc_sum += out.batch_acc;
            seen += 1;
            steps_done += 1;
        }
        if seen > 0 {
            record.epoch_train_loss.push(loss_sum / seen as f64);
            record.epoch_train_acc.push(acc_sum / seen as f64);
            let (val_loss, val_acc) = evaluate(&model, &splits.val)?;
            record.epoch_val_loss.push(val_loss);
            record.epoch_val_acc.push(val_acc);
        }
        if cfg.max_steps.is_some_and(|cap| steps_done >= cap) {
            break 'epochs;
        }
    }

    let fwd = forward(&model, &splits.test.x_a, &splits.test.x_v)?;
    record.test_acc = accuracy(&fwd.logits, &splits.test.labels)?;
    record.test_map = mean_average_precision(&class_probabilities(&fwd.logits), &splits.test.labels)?;
    Ok((model, record))
}
