//! Synthetic imbalanced two-modality datasets, CSV ingestion, and
//! minibatch management.
//!
//! Samples are class-conditional Gaussians: per modality the class means
//! sit at scaled one-hot corners, so `separation_a > separation_v` makes
//! the first modality carry more class signal (higher uni-modal
//! Bayes-optimal accuracy). Features are stored standardized with the
//! transform fit on the train split and frozen for val/test.

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng, Stream};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::model::Modality;

/// One minibatch of paired modality features with class labels.
#[derive(Debug, Clone)]
pub struct MultimodalBatch {
    pub x_a: Matrix,
    pub x_v: Matrix,
    pub labels: Vec<usize>,
}

impl MultimodalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An immutable split: row-aligned feature matrices and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_a: Matrix,
    pub x_v: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim_a(&self) -> usize {
        self.x_a.cols()
    }

    pub fn dim_v(&self) -> usize {
        self.x_v.cols()
    }

    /// The whole split as one batch (for evaluation passes).
    pub fn full_batch(&self) -> MultimodalBatch {
        MultimodalBatch {
            x_a: self.x_a.clone(),
            x_v: self.x_v.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Copy with one modality's features zeroed everywhere: the device used
    /// to train and evaluate a uni-modal reference model inside the same
    /// two-branch architecture (the silenced branch only learns a constant).
    pub fn silence_modality(&self, m: Modality) -> Dataset {
        let mut out = self.clone();
        match m {
            Modality::Audio => out.x_a = Matrix::zeros(self.len(), self.dim_a()),
            Modality::Visual => out.x_v = Matrix::zeros(self.len(), self.dim_v()),
        }
        out
    }
}

/// Train/validation/test triple.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn silence_modality(&self, m: Modality) -> DatasetSplits {
        DatasetSplits {
            train: self.train.silence_modality(m),
            val: self.val.silence_modality(m),
            test: self.test.silence_modality(m),
        }
    }
}

/// Recipe for a synthetic dataset. `separation_*` is the class-mean scale
/// per modality; `label_noise` is the fraction of labels resampled
/// uniformly after features are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim_a: usize,
    pub dim_v: usize,
    pub separation_a: f64,
    pub separation_v: f64,
    pub noise_std: f64,
    pub label_noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.dim_a < self.classes || self.dim_v < self.classes {
            return Err(Error::Config(
                "feature dims must be at least the class count so class means get distinct corners"
                    .into(),
            ));
        }
        if self.separation_a < 0.0 || self.separation_v < 0.0 {
            return Err(Error::Config("separation must be non-negative".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must be in [0, 1)".into()));
        }
        if self.n_train < 2 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("splits too small".into()));
        }
        Ok(())
    }
}

struct RawSplit {
    x_a: Matrix,
    x_v: Matrix,
    labels: Vec<usize>,
}

fn draw_split(spec: &SyntheticSpec, n: usize, rng: &mut Rng) -> RawSplit {
    let mut x_a = Matrix::zeros(n, spec.dim_a);
    let mut x_v = Matrix::zeros(n, spec.dim_v);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let class = rng.below(spec.classes);
        for (c, x) in x_a.row_mut(r).iter_mut().enumerate() {
            let mean = if c == class { spec.separation_a } else { 0.0 };
            *x = mean + spec.noise_std * rng.standard_normal();
        }
        for (c, x) in x_v.row_mut(r).iter_mut().enumerate() {
            let mean = if c == class { spec.separation_v } else { 0.0 };
            *x = mean + spec.noise_std * rng.standard_normal();
        }
        // Features always follow the true class; only the label is corrupted.
        // The replacement label is drawn unconditionally so the feature
        // stream is identical across label_noise settings.
        let corrupt = rng.uniform();
        let resampled = rng.below(spec.classes);
        labels.push(if corrupt < spec.label_noise {
            resampled
        } else {
            class
        });
    }
    RawSplit { x_a, x_v, labels }
}

/// Per-dimension affine transform fit on the train split.
struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Matrix) -> Self {
        let n = x.rows() as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for r in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in 0..x.rows() {
            for (s, (v, m)) in std.iter_mut().zip(x.row(r).iter().zip(&mean)) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    fn apply(&self, x: &mut Matrix) {
        for r in 0..x.rows() {
            for (v, (m, s)) in x.row_mut(r).iter_mut().zip(self.mean.iter().zip(&self.std)) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Draws the three splits and standardizes features with train-split
/// statistics. Deterministic per spec (including the seed) and independent
/// of any training-time RNG stream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed, Stream::Data);
    let mut train = draw_split(spec, spec.n_train, &mut rng);
    let mut val = draw_split(spec, spec.n_val, &mut rng);
    let mut test = draw_split(spec, spec.n_test, &mut rng);

    let std_a = Standardizer::fit(&train.x_a);
    let std_v = Standardizer::fit(&train.x_v);
    for split in [&mut train, &mut val, &mut test] {
        std_a.apply(&mut split.x_a);
        std_v.apply(&mut split.x_v);
    }

    let build = |s: RawSplit| Dataset {
        x_a: s.x_a,
        x_v: s.x_v,
        labels: s.labels,
        classes: spec.classes,
    };
    Ok(DatasetSplits {
        train: build(train),
        val: build(val),
        test: build(test),
    })
}

/// Writes a split as CSV: header `label,a_0..a_{da-1},v_0..v_{dv-1}`, one
/// sample per row, decimal floats that round-trip exactly.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = String::from("label");
    for c in 0..ds.dim_a() {
        header.push_str(&format!(",a_{c}"));
    }
    for c in 0..ds.dim_v() {
        header.push_str(&format!(",v_{c}"));
    }
    writeln!(out, "{header}")?;
    for r in 0..ds.len() {
        let mut line = ds.labels[r].to_string();
        for v in ds.x_a.row(r) {
            line.push_str(&format!(",{v}"));
        }
        for v in ds.x_v.row(r) {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn data_err(path: &Path, line: usize, msg: impl AsRef<str>) -> Error {
    Error::Data(format!("{}:{line}: {}", path.display(), msg.as_ref()))
}

/// Reads a split back; feature dims are inferred from the header. The class
/// count is inferred as `max label + 1` (use [`load_splits`] to unify it
/// across the three split files).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(data_err(path, 1, "no data rows")),
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(data_err(path, 1, "first header column must be `label`"));
    }
    let dim_a = cols.iter().filter(|c| c.starts_with("a_")).count();
    let dim_v = cols.iter().filter(|c| c.starts_with("v_")).count();
    if dim_a == 0 || dim_v == 0 || cols.len() != 1 + dim_a + dim_v {
        return Err(data_err(path, 1, "header must be label,a_0..,v_0.."));
    }

    let mut labels = Vec::new();
    let mut rows_a: Vec<f64> = Vec::new();
    let mut rows_v: Vec<f64> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(data_err(
                path,
                line_no,
                format!("expected {} fields, got {}", cols.len(), fields.len()),
            ));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| data_err(path, line_no, format!("bad label `{}`", fields[0])))?;
        labels.push(label);
        for f in &fields[1..=dim_a] {
            rows_a.push(f.trim().parse().map_err(|_| {
                data_err(path, line_no, format!("bad feature value `{f}`"))
            })?);
        }
        for f in &fields[1 + dim_a..] {
            rows_v.push(f.trim().parse().map_err(|_| {
                data_err(path, line_no, format!("bad feature value `{f}`"))
            })?);
        }
    }
    if labels.is_empty() {
        return Err(data_err(path, 1, "no data rows"));
    }
    let n = labels.len();
    let classes = labels.iter().max().unwrap() + 1;
    Ok(Dataset {
        x_a: Matrix::new(n, dim_a, rows_a)?,
        x_v: Matrix::new(n, dim_v, rows_v)?,
        labels,
        classes,
    })
}

/// Loads `train.csv`, `val.csv`, `test.csv` from a directory and unifies
/// the class count across them.
pub fn load_splits(dir: &Path) -> Result<DatasetSplits> {
    let mut train = load_csv(&dir.join("train.csv"))?;
    let mut val = load_csv(&dir.join("val.csv"))?;
    let mut test = load_csv(&dir.join("test.csv"))?;
    let classes = train.classes.max(val.classes).max(test.classes);
    let (dim_a, dim_v) = (train.dim_a(), train.dim_v());
    for ds in [&mut train, &mut val, &mut test] {
        ds.classes = classes;
        if ds.dim_a() != dim_a || ds.dim_v() != dim_v {
            return Err(Error::Data(format!(
                "splits in {} disagree on feature dims",
                dir.display()
            )));
        }
    }
    Ok(DatasetSplits { train, val, test })
}

/// One epoch of minibatches: a fresh random permutation partitioned into
/// consecutive batches. A trailing batch smaller than 2 is dropped (the
/// noise estimator needs at least 2 samples).
pub fn minibatches(ds: &Dataset, m: usize, rng: &mut Rng) -> Result<Vec<MultimodalBatch>> {
    if m < 2 {
        return Err(Error::Contract("batch size must be at least 2".into()));
    }
    if ds.len() < 2 {
        return Err(Error::Contract("split smaller than 2".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    let mut out = Vec::with_capacity(ds.len().div_ceil(m));
    for chunk in order.chunks(m) {
        if chunk.len() < 2 {
            break;
        }
        out.push(MultimodalBatch {
            x_a: ds.x_a.take_rows(chunk),
            x_v: ds.x_v.take_rows(chunk),
            labels: chunk.iter().map(|&i| ds.labels[i]).collect(),
        });
    }
    Ok(out)
}
