//! The two-encoder discriminative network: rectifier MLP encoders per
//! modality, a blocked linear classifier over the fused features, and exact
//! backpropagation including per-sample gradients.
//!
//! The classifier weight is kept as two blocks `w_a`, `w_v` so each
//! modality's contribution to the logits, and its gradient, stays separable:
//! `logits = w_a*f_a + w_v*f_v + bias`. Fused logits are computed as the sum
//! of the two half-bias uni-modal logits, which makes the decomposition
//! identity hold bitwise.

use crate::error::{Error, Result};
use crate::numkit::{gemm, gemm_nt, gemm_tn, log_sum_exp, softmax, Matrix, Rng};
use serde::{Deserialize, Serialize};

/// One linear layer: `weight` is `d_out x d_in`, applied as `x * weight^T + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Rectifier MLP: ReLU between layers, identity at the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.weight.cols()).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.rows()).unwrap_or(0)
    }
}

/// Which input channel of a sample a tensor or operation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concatenation,
    Summation,
}

/// Blocked classifier head. `w_a` is `M x d_fa`, `w_v` is `M x d_fv`.
/// Summation mode keeps per-block weights but requires equal feature dims
/// and starts from a shared block, so the score computation is identical
/// across modes.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub mode: FusionMode,
    pub w_a: Matrix,
    pub w_v: Matrix,
    pub bias: Vec<f64>,
}

impl FusionHead {
    pub fn classes(&self) -> usize {
        self.w_a.rows()
    }

    pub fn block(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Audio => &self.w_a,
            Modality::Visual => &self.w_v,
        }
    }

    fn validate(&self) -> Result<()> {
        let m = self.w_a.rows();
        if m < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        if self.w_v.rows() != m || self.bias.len() != m {
            return Err(Error::Shape("head blocks disagree on class count".into()));
        }
        if self.mode == FusionMode::Summation && self.w_a.cols() != self.w_v.cols() {
            return Err(Error::Shape(
                "summation fusion requires equal feature dims".into(),
            ));
        }
        Ok(())
    }
}

/// Full parameter set. Also reused as the container for anything
/// parameter-shaped: gradients, per-entry variances, noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder_a: EncoderParams,
    pub encoder_v: EncoderParams,
    pub head: FusionHead,
}

/// Network shape: `dims_*` are the full layer chains including the input
/// dim, e.g. `[8, 6, 4]` is an 8->6->4 encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub dims_a: Vec<usize>,
    pub dims_v: Vec<usize>,
    pub classes: usize,
    pub fusion: FusionMode,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        for dims in [&self.dims_a, &self.dims_v] {
            if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
                return Err(Error::Config(
                    "encoder dims need an input and an output layer, all nonzero".into(),
                ));
            }
        }
        if self.fusion == FusionMode::Summation
            && self.dims_a.last() != self.dims_v.last()
        {
            return Err(Error::Config(
                "summation fusion requires equal encoder output dims".into(),
            ));
        }
        Ok(())
    }
}

fn init_encoder(dims: &[usize], rng: &mut Rng) -> EncoderParams {
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (d_in, d_out) = (w[0], w[1]);
        let std = (2.0 / d_in as f64).sqrt();
        let weight = Matrix::from_fn(d_out, d_in, |_, _| rng.normal(0.0, std));
        layers.push(Layer {
            weight,
            bias: vec![0.0; d_out],
        });
    }
    EncoderParams { layers }
}

impl ModelParams {
    /// Fresh parameters: He-initialized encoders, Xavier-ish head, zero
    /// biases. Summation mode starts from a shared classifier block.
    pub fn init(arch: &ModelArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let encoder_a = init_encoder(&arch.dims_a, rng);
        let encoder_v = init_encoder(&arch.dims_v, rng);
        let (d_fa, d_fv) = (*arch.dims_a.last().unwrap(), *arch.dims_v.last().unwrap());
        let m = arch.classes;
        let w_a = Matrix::from_fn(m, d_fa, |_, _| rng.normal(0.0, (1.0 / d_fa as f64).sqrt()));
        let w_v = match arch.fusion {
            FusionMode::Concatenation => {
                Matrix::from_fn(m, d_fv, |_, _| rng.normal(0.0, (1.0 / d_fv as f64).sqrt()))
            }
            FusionMode::Summation => w_a.clone(),
        };
        let head = FusionHead {
            mode: arch.fusion,
            w_a,
            w_v,
            bias: vec![0.0; m],
        };
        head.validate()?;
        Ok(Self {
            encoder_a,
            encoder_v,
            head,
        })
    }

    /// Same shapes, all entries zero. Gradient/variance/noise containers.
    pub fn zeros_like(&self) -> Self {
        let zero_enc = |e: &EncoderParams| EncoderParams {
            layers: e
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        };
        Self {
            encoder_a: zero_enc(&self.encoder_a),
            encoder_v: zero_enc(&self.encoder_v),
            head: FusionHead {
                mode: self.head.mode,
                w_a: Matrix::zeros(self.head.w_a.rows(), self.head.w_a.cols()),
                w_v: Matrix::zeros(self.head.w_v.rows(), self.head.w_v.cols()),
                bias: vec![0.0; self.head.bias.len()],
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn encoder(&self, m: Modality) -> &EncoderParams {
        match m {
            Modality::Audio => &self.encoder_a,
            Modality::Visual => &self.encoder_v,
        }
    }

    /// Flat view of every tensor, in a fixed canonical order.
    pub fn tensors(&self) -> Vec<TensorSlot<'_>> {
        let mut out = Vec::new();
        for (enc, role, tag) in [
            (&self.encoder_a, TensorRole::EncoderA, "encoder_a"),
            (&self.encoder_v, TensorRole::EncoderV, "encoder_v"),
        ] {
            for (i, layer) in enc.layers.iter().enumerate() {
                out.push(TensorSlot {
                    role,
                    name: format!("{tag}.layer{i}.weight"),
                    data: layer.weight.data(),
                });
                out.push(TensorSlot {
                    role,
                    name: format!("{tag}.layer{i}.bias"),
                    data: &layer.bias,
                });
            }
        }
        out.push(TensorSlot {
            role: TensorRole::HeadA,
            name: "head.w_a".into(),
            data: self.head.w_a.data(),
        });
        out.push(TensorSlot {
            role: TensorRole::HeadV,
            name: "head.w_v".into(),
            data: self.head.w_v.data(),
        });
        out.push(TensorSlot {
            role: TensorRole::HeadBias,
            name: "head.bias".into(),
            data: &self.head.bias,
        });
        out
    }

    /// Mutable flat view, same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorSlotMut<'_>> {
        let mut out = Vec::new();
        for (enc, role, tag) in [
            (&mut self.encoder_a, TensorRole::EncoderA, "encoder_a"),
            (&mut self.encoder_v, TensorRole::EncoderV, "encoder_v"),
        ] {
            for (i, layer) in enc.layers.iter_mut().enumerate() {
                out.push(TensorSlotMut {
                    role,
                    name: format!("{tag}.layer{i}.weight"),
                    data: layer.weight.data_mut(),
                });
                out.push(TensorSlotMut {
                    role,
                    name: format!("{tag}.layer{i}.bias"),
                    data: &mut layer.bias,
                });
            }
        }
        out.push(TensorSlotMut {
            role: TensorRole::HeadA,
            name: "head.w_a".into(),
            data: self.head.w_a.data_mut(),
        });
        out.push(TensorSlotMut {
            role: TensorRole::HeadV,
            name: "head.w_v".into(),
            data: self.head.w_v.data_mut(),
        });
        out.push(TensorSlotMut {
            role: TensorRole::HeadBias,
            name: "head.bias".into(),
            data: &mut self.head.bias,
        });
        out
    }

    /// Name of the first tensor containing a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name)
    }
}

/// Where a tensor sits in the model; drives modulation and noise policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    EncoderA,
    EncoderV,
    HeadA,
    HeadV,
    HeadBias,
}

impl TensorRole {
    /// The modality a tensor is specific to; `None` for the shared bias.
    pub fn modality(self) -> Option<Modality> {
        match self {
            TensorRole::EncoderA | TensorRole::HeadA => Some(Modality::Audio),
            TensorRole::EncoderV | TensorRole::HeadV => Some(Modality::Visual),
            TensorRole::HeadBias => None,
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, TensorRole::EncoderA | TensorRole::EncoderV)
    }
}

pub struct TensorSlot<'a> {
    pub role: TensorRole,
    pub name: String,
    pub data: &'a [f64],
}

pub struct TensorSlotMut<'a> {
    pub role: TensorRole,
    pub name: String,
    pub data: &'a mut [f64],
}

/// Activations cached by a forward pass, enough for exact backprop.
/// `inputs[l]` is the input to layer `l`; `preacts[l]` its pre-activation.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
}

impl EncoderCache {
    /// Single-row slice of the cache, for per-sample backward passes.
    fn row(&self, i: usize) -> EncoderCache {
        EncoderCache {
            inputs: self.inputs.iter().map(|m| m.take_rows(&[i])).collect(),
            preacts: self.preacts.iter().map(|m| m.take_rows(&[i])).collect(),
        }
    }
}

/// Runs the rectifier MLP on a `batch x d_in` matrix, returning the
/// `batch x d_out` features and the cache needed for backprop.
pub fn encoder_forward(enc: &EncoderParams, x: &Matrix) -> Result<(Matrix, EncoderCache)> {
    if x.cols() != enc.input_dim() {
        return Err(Error::Shape(format!(
            "encoder expects input dim {}, got {}",
            enc.input_dim(),
            x.cols()
        )));
    }
    let n_layers = enc.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut preacts = Vec::with_capacity(n_layers);
    let mut cur = x.clone();
    for (l, layer) in enc.layers.iter().enumerate() {
        let mut z = gemm_nt(&cur, &layer.weight)?;
        for r in 0..z.rows() {
            for (zv, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *zv += b;
            }
        }
        inputs.push(cur);
        preacts.push(z.clone());
        if l + 1 < n_layers {
            for v in z.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        cur = z;
    }
    Ok((cur, EncoderCache { inputs, preacts }))
}

/// Approximated uni-modal prediction: `w_u * f_u + bias/2`. Splitting the
/// bias evenly keeps the two halves summing back to the fused logits.
pub fn unimodal_logits(head: &FusionHead, f_u: &Matrix, modality: Modality) -> Result<Matrix> {
    let w = head.block(modality);
    let mut out = gemm_nt(f_u, w)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(&head.bias) {
            *o += b / 2.0;
        }
    }
    Ok(out)
}

/// Fused logits `w_a*f_a + w_v*f_v + bias`, computed as the sum of the two
/// uni-modal halves so `unimodal_a + unimodal_v == fused` exactly.
pub fn fuse_logits(head: &FusionHead, f_a: &Matrix, f_v: &Matrix) -> Result<Matrix> {
    head.validate()?;
    if f_a.rows() != f_v.rows() {
        return Err(Error::Shape(format!(
            "feature batches disagree: {} vs {}",
            f_a.rows(),
            f_v.rows()
        )));
    }
    let ua = unimodal_logits(head, f_a, Modality::Audio)?;
    let uv = unimodal_logits(head, f_v, Modality::Visual)?;
    ua.add(&uv)
}

/// Everything a training step needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub f_a: Matrix,
    pub f_v: Matrix,
    pub cache_a: EncoderCache,
    pub cache_v: EncoderCache,
    pub logits: Matrix,
}

pub fn forward(model: &ModelParams, x_a: &Matrix, x_v: &Matrix) -> Result<ForwardPass> {
    if x_a.rows() != x_v.rows() {
        return Err(Error::Shape(format!(
            "modality batches disagree: {} vs {}",
            x_a.rows(),
            x_v.rows()
        )));
    }
    let (f_a, cache_a) = encoder_forward(&model.encoder_a, x_a)?;
    let (f_v, cache_v) = encoder_forward(&model.encoder_v, x_v)?;
    let logits = fuse_logits(&model.head, &f_a, &f_v)?;
    Ok(ForwardPass {
        f_a,
        f_v,
        cache_a,
        cache_v,
        logits,
    })
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy `-1/N sum log softmax(logits)[y]`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    if logits.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / logits.rows() as f64)
}

/// Per-sample gradient of the sample's own loss w.r.t. its logits:
/// `softmax(f(x_i)) - onehot(y_i)`, one row per sample.
pub fn loss_grad_logits(logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax(logits.row(r));
        let orow = out.row_mut(r);
        orow.copy_from_slice(&p);
        orow[y] -= 1.0;
    }
    Ok(out)
}

/// Mean gradients plus, on request, the stack of per-sample gradients.
/// When both are present the mean equals the average of the stack.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub mean: ModelParams,
    pub per_sample: Option<Vec<ModelParams>>,
    pub batch: usize,
}

fn check_cache(model: &ModelParams, fwd: &ForwardPass) -> Result<()> {
    let fits = |enc: &EncoderParams, cache: &EncoderCache| {
        cache.inputs.len() == enc.layers.len()
            && enc
                .layers
                .iter()
                .zip(&cache.inputs)
                .all(|(l, x)| l.weight.cols() == x.cols())
            && enc
                .layers
                .iter()
                .zip(&cache.preacts)
                .all(|(l, z)| l.weight.rows() == z.cols())
    };
    if !fits(&model.encoder_a, &fwd.cache_a)
        || !fits(&model.encoder_v, &fwd.cache_v)
        || fwd.logits.cols() != model.classes()
    {
        return Err(Error::Contract(
            "forward cache does not match this model".into(),
        ));
    }
    Ok(())
}

fn encoder_backward(
    enc: &EncoderParams,
    cache: &EncoderCache,
    dfeat: &Matrix,
    out: &mut EncoderParams,
) -> Result<()> {
    let mut delta = dfeat.clone();
    for l in (0..enc.layers.len()).rev() {
        if l + 1 < enc.layers.len() {
            // Through the rectifier: zero where the pre-activation was <= 0.
            let z = &cache.preacts[l];
            for (d, &zv) in delta.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let dw = gemm_tn(&delta, &cache.inputs[l])?;
        let grad_layer = &mut out.layers[l];
        for (g, d) in grad_layer.weight.data_mut().iter_mut().zip(dw.data()) {
            *g += d;
        }
        for r in 0..delta.rows() {
            for (gb, d) in grad_layer.bias.iter_mut().zip(delta.row(r)) {
                *gb += d;
            }
        }
        if l > 0 {
            delta = gemm(&delta, &enc.layers[l].weight)?;
        }
    }
    Ok(())
}

/// Backprop from an injected logit gradient (one row per sample, summed over
/// the batch — callers scale `dlogits` to choose mean vs. per-sample
/// semantics). Keeping the logit gradient an explicit input makes each
/// modality's parameter gradients independent of the other encoder.
pub fn backward_from(
    model: &ModelParams,
    fwd: &ForwardPass,
    dlogits: &Matrix,
) -> Result<ModelParams> {
    check_cache(model, fwd)?;
    if dlogits.rows() != fwd.logits.rows() || dlogits.cols() != fwd.logits.cols() {
        return Err(Error::Shape("dlogits shape mismatch".into()));
    }
    let mut grads = model.zeros_like();

    // Head blocks: dW_u = dlogits^T * f_u; shared bias gets column sums.
    let dwa = gemm_tn(dlogits, &fwd.f_a)?;
    let dwv = gemm_tn(dlogits, &fwd.f_v)?;
    grads.head.w_a = dwa;
    grads.head.w_v = dwv;
    for r in 0..dlogits.rows() {
        for (gb, d) in grads.head.bias.iter_mut().zip(dlogits.row(r)) {
            *gb += d;
        }
    }

    // Into each encoder: df_u = dlogits * w_u.
    let dfa = gemm(dlogits, &model.head.w_a)?;
    let dfv = gemm(dlogits, &model.head.w_v)?;
    encoder_backward(&model.encoder_a, &fwd.cache_a, &dfa, &mut grads.encoder_a)?;
    encoder_backward(&model.encoder_v, &fwd.cache_v, &dfv, &mut grads.encoder_v)?;
    Ok(grads)
}

/// Exact gradients of the mean cross-entropy for every tensor. With
/// `want_per_sample`, also the per-sample gradient stack (a second backward
/// pass with batch-size-1 semantics over the same caches).
pub fn backward(
    model: &ModelParams,
    fwd: &ForwardPass,
    labels: &[usize],
    want_per_sample: bool,
) -> Result<GradientBundle> {
    let batch = fwd.logits.rows();
    let mut dlogits = loss_grad_logits(&fwd.logits, labels)?;
    let per_sample = if want_per_sample {
        let mut stack = Vec::with_capacity(batch);
        for i in 0..batch {
            let fwd_i = ForwardPass {
                f_a: fwd.f_a.take_rows(&[i]),
                f_v: fwd.f_v.take_rows(&[i]),
                cache_a: fwd.cache_a.row(i),
                cache_v: fwd.cache_v.row(i),
                logits: fwd.logits.take_rows(&[i]),
            };
            stack.push(backward_from(model, &fwd_i, &dlogits.take_rows(&[i]))?);
        }
        Some(stack)
    } else {
        None
    };
    dlogits.scale(1.0 / batch as f64);
    let mean = backward_from(model, fwd, &dlogits)?;
    Ok(GradientBundle {
        mean,
        per_sample,
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn small_arch() -> ModelArch {
        ModelArch {
            dims_a: vec![8, 6, 4],
            dims_v: vec![8, 6, 4],
            classes: 3,
            fusion: FusionMode::Concatenation,
        }
    }

    fn random_input(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn zero_encoder_maps_to_zero() {
        let enc = EncoderParams {
            layers: vec![Layer {
                weight: Matrix::zeros(3, 4),
                bias: vec![0.0; 3],
            }],
        };
        let x = Matrix::new(2, 4, vec![1.0; 8]).unwrap();
        let (f, _) = encoder_forward(&enc, &x).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let enc = EncoderParams {
            layers: vec![Layer {
                weight: Matrix::identity(4),
                bias: vec![0.0; 4],
            }],
        };
        let mut rng = Rng::new(1, Stream::Init);
        let x = random_input(3, 4, &mut rng);
        let (f, _) = encoder_forward(&enc, &x).unwrap();
        assert_eq!(f, x);
    }

    #[test]
    fn encoder_matches_independent_forward_oracle() {
        let mut rng = Rng::new(2, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let enc = &model.encoder_a;
        let x = random_input(5, 8, &mut rng);
        let (f, _) = encoder_forward(enc, &x).unwrap();
        // Plain nested-loop reimplementation of the same two-layer net.
        for r in 0..5 {
            let mut h = vec![0.0; 6];
            for (j, hv) in h.iter_mut().enumerate() {
                let mut acc = enc.layers[0].bias[j];
                for k in 0..8 {
                    acc += enc.layers[0].weight.get(j, k) * x.get(r, k);
                }
                *hv = acc.max(0.0);
            }
            for j in 0..4 {
                let mut acc = enc.layers[1].bias[j];
                for (k, hv) in h.iter().enumerate() {
                    acc += enc.layers[1].weight.get(j, k) * hv;
                }
                approx(f.get(r, j), acc, 1e-12);
            }
        }
    }

    #[test]
    fn fuse_silenced_modality_reduces_to_single_block() {
        let mut rng = Rng::new(3, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let mut head = model.head.clone();
        head.bias = vec![0.1, -0.4, 0.25];
        let f_a = random_input(4, 4, &mut rng);
        let f_v = Matrix::zeros(4, 4);
        let logits = fuse_logits(&head, &f_a, &f_v).unwrap();
        let direct = gemm_nt(&f_a, &head.w_a).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                approx(logits.get(r, c), direct.get(r, c) + head.bias[c], 1e-15);
            }
        }
    }

    #[test]
    fn blocked_head_equals_single_gemm_on_concatenated_features() {
        let mut rng = Rng::new(4, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let mut head = model.head.clone();
        head.bias = vec![0.3, -0.2, 0.05];
        let f_a = random_input(6, 4, &mut rng);
        let f_v = random_input(6, 4, &mut rng);
        let blocked = fuse_logits(&head, &f_a, &f_v).unwrap();

        // Oracle: one multiplication on [f_a; f_v] against [w_a, w_v].
        let cat = Matrix::from_fn(6, 8, |r, c| {
            if c < 4 {
                f_a.get(r, c)
            } else {
                f_v.get(r, c - 4)
            }
        });
        let w_cat = Matrix::from_fn(3, 8, |r, c| {
            if c < 4 {
                head.w_a.get(r, c)
            } else {
                head.w_v.get(r, c - 4)
            }
        });
        let single = gemm_nt(&cat, &w_cat).unwrap();
        for r in 0..6 {
            for c in 0..3 {
                approx(blocked.get(r, c), single.get(r, c) + head.bias[c], 1e-12);
            }
        }
    }

    #[test]
    fn all_zero_params_broadcast_bias() {
        let mut rng = Rng::new(5, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let mut zeroed = model.zeros_like();
        zeroed.head.bias = vec![0.7, -1.0, 0.2];
        let f_a = Matrix::zeros(3, 4);
        let f_v = Matrix::zeros(3, 4);
        let logits = fuse_logits(&zeroed.head, &f_a, &f_v).unwrap();
        for r in 0..3 {
            assert_eq!(logits.row(r), &[0.7, -1.0, 0.2]);
        }
    }

    #[test]
    fn unimodal_halves_reconstruct_fused_logits_bitwise() {
        let mut rng = Rng::new(6, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let mut head = model.head.clone();
        head.bias = vec![0.11, -0.3, 0.42];
        let f_a = random_input(5, 4, &mut rng);
        let f_v = random_input(5, 4, &mut rng);
        let ua = unimodal_logits(&head, &f_a, Modality::Audio).unwrap();
        let uv = unimodal_logits(&head, &f_v, Modality::Visual).unwrap();
        let fused = fuse_logits(&head, &f_a, &f_v).unwrap();
        assert_eq!(ua.add(&uv).unwrap(), fused);
    }

    #[test]
    fn unimodal_zero_bias_is_plain_block_product() {
        let mut rng = Rng::new(7, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let mut head = model.head;
        head.bias = vec![0.0; 3];
        let f_v = random_input(4, 4, &mut rng);
        let got = unimodal_logits(&head, &f_v, Modality::Visual).unwrap();
        let want = gemm_nt(&f_v, &head.w_v).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_m() {
        let logits = Matrix::zeros(4, 3);
        let loss = cross_entropy(&logits, &[0, 1, 2, 0]).unwrap();
        approx(loss, 3.0_f64.ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_approaches_zero() {
        let mut logits = Matrix::zeros(2, 3);
        logits.set(0, 1, 50.0);
        logits.set(1, 2, 50.0);
        let loss = cross_entropy(&logits, &[1, 2]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = Rng::new(8, Stream::Init);
        let logits = random_input(6, 4, &mut rng);
        let labels = [0, 3, 1, 2, 2, 0];
        let got = cross_entropy(&logits, &labels).unwrap();
        // Direct exp/sum route, safe for small logits.
        let mut want = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let sum: f64 = logits.row(r).iter().map(|x| x.exp()).sum();
            want -= (logits.get(r, y).exp() / sum).ln();
        }
        approx(got, want / 6.0, 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn loss_grad_uniform_case() {
        let logits = Matrix::zeros(1, 3);
        let g = loss_grad_logits(&logits, &[0]).unwrap();
        approx(g.get(0, 0), -2.0 / 3.0, 1e-15);
        approx(g.get(0, 1), 1.0 / 3.0, 1e-15);
        approx(g.get(0, 2), 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn loss_grad_confident_correct_is_near_zero() {
        let mut logits = Matrix::zeros(1, 3);
        logits.set(0, 0, 60.0);
        let g = loss_grad_logits(&logits, &[0]).unwrap();
        assert!(g.data().iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn loss_grad_matches_finite_difference_of_cross_entropy() {
        let mut rng = Rng::new(9, Stream::Init);
        let logits = random_input(3, 4, &mut rng);
        let labels = [2, 0, 1];
        let g = loss_grad_logits(&logits, &labels).unwrap();
        let h = 1e-5;
        for r in 0..3 {
            for c in 0..4 {
                let mut plus = logits.clone();
                plus.set(r, c, logits.get(r, c) + h);
                let mut minus = logits.clone();
                minus.set(r, c, logits.get(r, c) - h);
                // cross_entropy averages over the batch; undo the 1/N.
                let fd = (cross_entropy(&plus, &labels).unwrap()
                    - cross_entropy(&minus, &labels).unwrap())
                    / (2.0 * h)
                    * 3.0;
                let rel = (g.get(r, c) - fd).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-6, "({r},{c}): {} vs {}", g.get(r, c), fd);
            }
        }
    }

    #[test]
    fn backward_zero_logit_grad_gives_zero_grads() {
        let mut rng = Rng::new(10, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let x_a = random_input(4, 8, &mut rng);
        let x_v = random_input(4, 8, &mut rng);
        let fwd = forward(&model, &x_a, &x_v).unwrap();
        let grads = backward_from(&model, &fwd, &Matrix::zeros(4, 3)).unwrap();
        for t in grads.tensors() {
            assert!(t.data.iter().all(|&x| x == 0.0), "{}", t.name);
        }
    }

    #[test]
    fn analytic_gradients_match_central_finite_differences() {
        let mut rng = Rng::new(11, Stream::Init);
        let mut model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let x_a = random_input(4, 8, &mut rng);
        let x_v = random_input(4, 8, &mut rng);
        let labels = [0, 1, 2, 1];
        let fwd = forward(&model, &x_a, &x_v).unwrap();
        let bundle = backward(&model, &fwd, &labels, false).unwrap();
        let analytic: Vec<Vec<f64>> = bundle
            .mean
            .tensors()
            .iter()
            .map(|t| t.data.to_vec())
            .collect();

        let h = 1e-5;
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            let len = analytic[ti].len();
            for j in 0..len {
                let orig = model.tensors_mut()[ti].data[j];
                model.tensors_mut()[ti].data[j] = orig + h;
                let lp = cross_entropy(&forward(&model, &x_a, &x_v).unwrap().logits, &labels)
                    .unwrap();
                model.tensors_mut()[ti].data[j] = orig - h;
                let lm = cross_entropy(&forward(&model, &x_a, &x_v).unwrap().logits, &labels)
                    .unwrap();
                model.tensors_mut()[ti].data[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let g = analytic[ti][j];
                let rel = (g - fd).abs() / fd.abs().max(1e-4);
                assert!(rel < 1e-4, "tensor {ti} entry {j}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn per_sample_mean_equals_batch_gradient() {
        let mut rng = Rng::new(12, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let x_a = random_input(4, 8, &mut rng);
        let x_v = random_input(4, 8, &mut rng);
        let labels = [2, 2, 0, 1];
        let fwd = forward(&model, &x_a, &x_v).unwrap();
        let bundle = backward(&model, &fwd, &labels, true).unwrap();
        let stack = bundle.per_sample.as_ref().unwrap();
        assert_eq!(stack.len(), 4);
        let mean_tensors = bundle.mean.tensors();
        for (ti, t) in mean_tensors.iter().enumerate() {
            for j in 0..t.data.len() {
                let avg: f64 =
                    stack.iter().map(|g| g.tensors()[ti].data[j]).sum::<f64>() / 4.0;
                let rel = (t.data[j] - avg).abs() / avg.abs().max(1.0);
                assert!(rel <= 1e-10, "{} entry {j}", t.name);
            }
        }
    }

    #[test]
    fn audio_gradient_ignores_visual_encoder_given_logit_grad() {
        // With the logit gradient held fixed, each modality's parameter
        // gradients must not depend on the other encoder at all.
        let mut rng = Rng::new(13, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let x_a = random_input(4, 8, &mut rng);
        let x_v = random_input(4, 8, &mut rng);
        let dlogits = random_input(4, 3, &mut rng);

        let fwd = forward(&model, &x_a, &x_v).unwrap();
        let g1 = backward_from(&model, &fwd, &dlogits).unwrap();

        let mut perturbed = model.clone();
        for layer in &mut perturbed.encoder_v.layers {
            for w in layer.weight.data_mut() {
                *w += rng.uniform_in(-0.5, 0.5);
            }
        }
        let fwd2 = forward(&perturbed, &x_a, &x_v).unwrap();
        let g2 = backward_from(&perturbed, &fwd2, &dlogits).unwrap();

        for (t1, t2) in g1.tensors().iter().zip(g2.tensors().iter()) {
            if t1.role == TensorRole::EncoderA {
                for (a, b) in t1.data.iter().zip(t2.data.iter()) {
                    approx(*a, *b, 1e-12);
                }
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(14, Stream::Init);
        let model = ModelParams::init(&small_arch(), &mut rng).unwrap();
        let other = ModelParams::init(
            &ModelArch {
                dims_a: vec![8, 5, 4],
                dims_v: vec![8, 6, 4],
                classes: 3,
                fusion: FusionMode::Concatenation,
            },
            &mut rng,
        )
        .unwrap();
        let x_a = random_input(2, 8, &mut rng);
        let x_v = random_input(2, 8, &mut rng);
        let fwd = forward(&other, &x_a, &x_v).unwrap();
        assert!(matches!(
            backward(&model, &fwd, &[0, 1], false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn summation_arch_requires_and_initializes_shared_dims() {
        let mut arch = small_arch();
        arch.fusion = FusionMode::Summation;
        let mut rng = Rng::new(15, Stream::Init);
        let model = ModelParams::init(&arch, &mut rng).unwrap();
        assert_eq!(model.head.w_a, model.head.w_v);

        arch.dims_v = vec![8, 6, 5];
        assert!(ModelParams::init(&arch, &mut rng).is_err());
    }
}
