//! Datasets: CSV ingestion, seeded train/test splits with standardization,
//! epoch-shuffled minibatches, and synthetic generators with known densities.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

const LN_2PI: f64 = 1.8378770664093453;

/// Per-column affine map to zero mean and unit standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Standardization {
    /// Fitted on `x`, `y` (population standard deviation; constant columns keep scale 1).
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let (x_mean, x_sd) = x.column_iter().map(|c| mean_sd(c.iter().copied())).unzip();
        let (y_mean, y_sd) = mean_sd(y.iter().copied());
        Standardization { x_mean, x_sd, y_mean, y_sd }
    }

    pub fn identity(d: usize) -> Self {
        Standardization { x_mean: vec![0.0; d], x_sd: vec![1.0; d], y_mean: 0.0, y_sd: 1.0 }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let x = DMatrix::from_fn(data.x.nrows(), data.x.ncols(), |i, j| (data.x[(i, j)] - self.x_mean[j]) / self.x_sd[j]);
        let y = data.y.map(|v| (v - self.y_mean) / self.y_sd);
        Dataset { x, y, ..data.clone() }
    }

    pub fn invert(&self, data: &Dataset) -> Dataset {
        let x = DMatrix::from_fn(data.x.nrows(), data.x.ncols(), |i, j| data.x[(i, j)] * self.x_sd[j] + self.x_mean[j]);
        let y = data.y.map(|v| v * self.y_sd + self.y_mean);
        Dataset { x, y, ..data.clone() }
    }

    pub fn x_to_raw(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, v)| v * self.x_sd[j] + self.x_mean[j]).collect()
    }

    pub fn x_to_standard(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, v)| (v - self.x_mean[j]) / self.x_sd[j]).collect()
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let sd = (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} input rows, {} targets", x.nrows(), y.len())));
        }
        let feature_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Dataset { x, y, feature_names, target_name: "y".into() })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset { x: self.x.select_rows(idx), y: self.y.select_rows(idx), ..self.clone() }
    }
}

/// Reads a headed CSV; every column except `target` (default: the last) becomes an input.
pub fn load_csv(path: impl AsRef<Path>, target: Option<&str>) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::MalformedRow { line: 1, reason: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let t = match target {
        Some(name) => headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingTarget(name.to_string()))?,
        None if headers.is_empty() => return Err(Error::MissingTarget("<last column>".into())),
        None => headers.len() - 1,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| Error::MalformedRow { line, reason: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::MalformedRow {
                line,
                reason: format!("{} fields, header has {}", record.len(), headers.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::MalformedRow { line, reason: format!("non-numeric value `{cell}` in column `{}`", headers[j]) })?;
            if !v.is_finite() {
                return Err(Error::MalformedRow { line, reason: format!("non-finite value in column `{}`", headers[j]) });
            }
            if j == t {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    let d = headers.len() - 1;
    Ok(Dataset {
        x: DMatrix::from_row_slice(n, d, &xs),
        y: DVector::from_vec(ys),
        feature_names: headers.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, h)| h.clone()).collect(),
        target_name: headers[t].clone(),
    })
}

/// Writes the inputs then the target, with a header row.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    let mut header = data.feature_names.clone();
    header.push(data.target_name.clone());
    w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(format!("{:?}", data.y[i]));
        w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub index: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.9, seed: 0, index: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// standardized
    pub train: Dataset,
    /// standardized with the training transform
    pub test: Dataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub transform: Standardization,
}

/// Shuffles by `(seed, index)`, keeps `floor(fraction · N)` rows for training and
/// standardizes both parts with statistics of the training rows.
pub fn standardize_split(data: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Config(format!("cannot split {n} rows")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {} outside (0, 1]", spec.train_fraction)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::new(spec.seed).with_key(0, spec.index, 0, 0).rng());
    let n_train = ((spec.train_fraction * n as f64).floor() as usize).clamp(1, n);
    let train_idx = order[..n_train].to_vec();
    let test_idx = order[n_train..].to_vec();
    let train_raw = data.select(&train_idx);
    let transform = Standardization::fit(&train_raw.x, &train_raw.y);
    Ok(Split {
        train: transform.apply(&train_raw),
        test: transform.apply(&data.select(&test_idx)),
        train_idx,
        test_idx,
        transform,
    })
}

/// Index batches over reshuffled epochs; the last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct Minibatches {
    n: usize,
    batch_size: usize,
    stream: RngStream,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl Minibatches {
    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        if self.batch_size < self.n {
            self.order.shuffle(&mut self.stream.with_key(self.epoch, u64::MAX, 0, 0).rng());
        }
        self.pos = 0;
    }
}

impl Iterator for Minibatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Endless epoch-shuffled batches over `0..n`, deterministic in `stream`.
pub fn minibatches(n: usize, batch_size: usize, stream: &RngStream) -> Result<Minibatches> {
    if batch_size == 0 || n == 0 {
        return Err(Error::Config("batch size and dataset size must be positive".into()));
    }
    let mut it = Minibatches { n, batch_size, stream: *stream, epoch: 0, pos: 0, order: Vec::new() };
    it.shuffle();
    Ok(it)
}

/// Exact conditional densities of the synthetic generators, on the raw scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroundTruth {
    /// `y = ±(1 + x/2) + 0.1 ε`
    Bimodal,
    /// `y = sin(2x) + σ(x) ε`, `σ(x) = 0.05 + 0.15 (1 + x/2)`
    Heteroscedastic,
}

pub const BIMODAL_NOISE_SD: f64 = 0.1;

pub fn heteroscedastic_sd(x: f64) -> f64 {
    0.05 + 0.3 * (1.0 + x / 2.0) / 2.0
}

fn normal_ln_pdf(y: f64, mean: f64, sd: f64) -> f64 {
    let z = (y - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

impl GroundTruth {
    pub fn log_density(&self, x: f64, y: f64) -> f64 {
        match self {
            GroundTruth::Bimodal => {
                let c = 1.0 + 0.5 * x;
                let a = normal_ln_pdf(y, c, BIMODAL_NOISE_SD);
                let b = normal_ln_pdf(y, -c, BIMODAL_NOISE_SD);
                crate::numerics::log_sum_exp(&[a, b]) - std::f64::consts::LN_2
            }
            GroundTruth::Heteroscedastic => normal_ln_pdf(y, (2.0 * x).sin(), heteroscedastic_sd(x)),
        }
    }

    /// Density of the standardized target given a standardized input.
    pub fn log_density_standardized(&self, t: &Standardization, x_std: f64, y_std: f64) -> f64 {
        let x = x_std * t.x_sd[0] + t.x_mean[0];
        let y = y_std * t.y_sd + t.y_mean;
        self.log_density(x, y) + t.y_sd.ln()
    }

    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed).with_key(0, 0, 0, 0xD47A).rng();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: f64 = rng.random_range(-2.0..2.0);
            let eps: f64 = rng.sample(StandardNormal);
            let yi = match self {
                GroundTruth::Bimodal => {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * (1.0 + 0.5 * xi) + BIMODAL_NOISE_SD * eps
                }
                GroundTruth::Heteroscedastic => (2.0 * xi).sin() + heteroscedastic_sd(xi) * eps,
            };
            x.push(xi);
            y.push(yi);
        }
        Dataset::new(DMatrix::from_vec(n, 1, x), DVector::from_vec(y)).expect("shapes agree")
    }

    pub fn name(&self) -> &'static str {
        match self {
            GroundTruth::Bimodal => "bimodal",
            GroundTruth::Heteroscedastic => "heteroscedastic",
        }
    }
}

pub fn synth_bimodal(n: usize, seed: u64) -> (Dataset, GroundTruth) {
    (GroundTruth::Bimodal.generate(n, seed), GroundTruth::Bimodal)
}

pub fn synth_heteroscedastic(n: usize, seed: u64) -> (Dataset, GroundTruth) {
    (GroundTruth::Heteroscedastic.generate(n, seed), GroundTruth::Heteroscedastic)
}
