//! Monte Carlo prediction, kernel-density log-likelihoods and the Shapiro–Wilk statistic.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{propagate, DgpModel, Draws, LatentSource, SampleMode};
use crate::numerics::{log_sum_exp, quantile_sorted, RngStream};

pub const DEFAULT_PREDICT_SAMPLES: usize = 2000;
/// Larger test sets are evaluated on a fixed subsample of this size.
pub const MAX_EVAL_POINTS: usize = 10_000;
/// Rows pushed through the model at once.
const CHUNK_ROWS: usize = 1 << 16;

/// `S` predictive draws per test input, one row per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSampleSet {
    pub samples: DMatrix<f64>,
    pub seed: u64,
}

impl PredictiveSampleSet {
    pub fn num_points(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.samples.row(i).iter().copied().collect()
    }
}

fn predict_chunk(model: &DgpModel, x: &DMatrix<f64>, first: usize, s: usize, stream: &RngStream) -> Result<DMatrix<f64>> {
    let indices: Vec<usize> = (first..first + x.nrows()).collect();
    let draws = Draws::keyed(model, &indices, s, stream);
    let p = propagate(model, x, s, &draws, SampleMode::Independent, LatentSource::Prior)?;
    let eps = draws.layers.last().expect("at least one layer");
    let noise = model.likelihood_variance;
    Ok(DMatrix::from_fn(x.nrows(), s, |i, k| {
        let r = i * s + k;
        p.mean[r] + (p.variance[r] + noise).sqrt() * eps[(r, 0)]
    }))
}

/// Draws `s` predictive samples at every row of `x`.
///
/// Latent covariates come from the prior, inner layers are sampled pointwise from their
/// marginals, and the final layer's marginal is sampled with observation noise added.
/// Test row `i` uses the stream keyed by datapoint `i`.
pub fn predict_samples(model: &DgpModel, x: &DMatrix<f64>, s: usize, stream: &RngStream) -> Result<PredictiveSampleSet> {
    if s < 2 {
        return Err(Error::Config(format!("at least 2 predictive samples are required, got {s}")));
    }
    let n = x.nrows();
    let per_chunk = (CHUNK_ROWS / s).max(1);
    let starts: Vec<usize> = (0..n).step_by(per_chunk).collect();
    let run = |&start: &usize| {
        let len = per_chunk.min(n - start);
        predict_chunk(model, &x.rows(start, len).into_owned(), start, s, stream)
    };
    #[cfg(feature = "parallel")]
    let chunks: Vec<Result<DMatrix<f64>>> = {
        use rayon::prelude::*;
        starts.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<Result<DMatrix<f64>>> = starts.iter().map(run).collect();
    let mut samples = DMatrix::zeros(n, s);
    for (start, chunk) in starts.iter().zip(chunks) {
        let chunk = chunk?;
        samples.rows_mut(*start, chunk.nrows()).copy_from(&chunk);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSamples);
    }
    Ok(PredictiveSampleSet { samples, seed: stream.seed })
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `0.9 · min(sd, iqr / 1.34) · S^(-1/5)`, falling back to `sd` when the iqr is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 || samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSamples);
    }
    let s = sorted(samples);
    let (_, sd) = mean_sd(&s);
    if !(sd > 0.0) {
        return Err(Error::DegenerateSamples);
    }
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (s.len() as f64).powf(-0.2))
}

/// Log of the Gaussian kernel density estimate at `y`, `bandwidth` defaulting to Silverman's rule.
/// The result does not depend on the order of `samples`.
pub fn kde_log_density(samples: &[f64], y: f64, bandwidth: Option<f64>) -> Result<f64> {
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(samples)?,
    };
    Ok(kde_sorted(&sorted(samples), y, h))
}

fn kde_sorted(sorted: &[f64], y: f64, h: f64) -> f64 {
    let norm = -(h.ln()) - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let terms: Vec<f64> = sorted.iter().map(|s| -0.5 * ((y - s) / h).powi(2) + norm).collect();
    log_sum_exp(&terms) - (sorted.len() as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeLoglik {
    pub per_point: Vec<f64>,
    pub mean: f64,
}

pub fn kde_loglik(set: &PredictiveSampleSet, y: &DVector<f64>, bandwidth: Option<f64>) -> Result<KdeLoglik> {
    if y.len() != set.num_points() || y.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} targets for {} sample rows", y.len(), set.num_points())));
    }
    let per_point = (0..y.len())
        .map(|i| kde_log_density(&set.point(i), y[i], bandwidth))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(KdeLoglik { per_point, mean })
}

const SW_LAST: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const SW_SECOND_LAST: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];

fn poly(c: &[f64; 6], u: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * u + k)
}

/// Coefficients for the ordered sample, antisymmetric with unit norm.
fn shapiro_wilk_coefficients(n: usize) -> Vec<f64> {
    if n == 3 {
        let r = 0.5f64.sqrt();
        return vec![-r, 0.0, r];
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let nf = n as f64;
    let m: Vec<f64> = (1..=n).map(|i| normal.inverse_cdf((i as f64 - 0.375) / (nf + 0.25))).collect();
    let mm: f64 = m.iter().map(|v| v * v).sum();
    let u = 1.0 / nf.sqrt();
    let an = m[n - 1] / mm.sqrt() + poly(&SW_LAST, u);
    let mut a = vec![0.0; n];
    let (phi, tail) = if n > 5 {
        let an1 = m[n - 2] / mm.sqrt() + poly(&SW_SECOND_LAST, u);
        let phi = (mm - 2.0 * m[n - 1].powi(2) - 2.0 * m[n - 2].powi(2)) / (1.0 - 2.0 * an.powi(2) - 2.0 * an1.powi(2));
        a[n - 2] = an1;
        a[1] = -an1;
        (phi, 2)
    } else {
        ((mm - 2.0 * m[n - 1].powi(2)) / (1.0 - 2.0 * an.powi(2)), 1)
    };
    a[n - 1] = an;
    a[0] = -an;
    for i in tail..n - tail {
        a[i] = m[i] / phi.sqrt();
    }
    a
}

/// Shapiro–Wilk `W` for `3 ≤ n ≤ 5000` samples.
pub fn shapiro_wilk(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::SizeOutOfRange(n));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSamples);
    }
    let x = sorted(samples);
    let mean = x.iter().sum::<f64>() / n as f64;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if !(ss > 0.0) || x[n - 1] - x[0] <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::ConstantSample);
    }
    let a = shapiro_wilk_coefficients(n);
    let num: f64 = a.iter().zip(&x).map(|(ai, xi)| ai * (xi - mean)).sum();
    Ok((num * num / ss).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// nats per point, standardized scale
    pub mean_loglik: f64,
    pub per_point_loglik: Vec<f64>,
    pub shapiro_wilk: Vec<f64>,
    pub median_shapiro_wilk: f64,
    /// rows of the test set that were evaluated
    pub evaluated: Vec<usize>,
}

/// Indices evaluated for a test set of `n` rows: all of them, or a fixed subsample of `MAX_EVAL_POINTS`.
pub fn evaluation_subset(n: usize, stream: &RngStream) -> Vec<usize> {
    if n <= MAX_EVAL_POINTS {
        return (0..n).collect();
    }
    let mut idx = sample(&mut stream.with_key(0, u64::MAX - 1, 0, 0).rng(), n, MAX_EVAL_POINTS).into_vec();
    idx.sort_unstable();
    idx
}

/// Test log-likelihood and per-point Shapiro–Wilk statistics on standardized test data.
pub fn evaluate(model: &DgpModel, x: &DMatrix<f64>, y: &DVector<f64>, s: usize, stream: &RngStream) -> Result<EvalReport> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} test inputs, {} targets", x.nrows(), y.len())));
    }
    let evaluated = evaluation_subset(y.len(), stream);
    let xs = x.select_rows(&evaluated);
    let ys = DVector::from_iterator(evaluated.len(), evaluated.iter().map(|&i| y[i]));
    let set = predict_samples(model, &xs, s, stream)?;
    let ll = kde_loglik(&set, &ys, None)?;
    let sw = (0..set.num_points())
        .map(|i| {
            let p = set.point(i);
            shapiro_wilk(&p[..p.len().min(5000)])
        })
        .collect::<Result<Vec<f64>>>()?;
    let median = quantile_sorted(&sorted(&sw), 0.5);
    Ok(EvalReport { mean_loglik: ll.mean, per_point_loglik: ll.per_point, shapiro_wilk: sw, median_shapiro_wilk: median, evaluated })
}

/// Mean and standard error across splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub mean: f64,
    pub std_err: f64,
    pub count: usize,
}

pub fn summarize_splits(values: &[f64]) -> SplitSummary {
    let count = values.len();
    if count == 0 {
        return SplitSummary { mean: f64::NAN, std_err: f64::NAN, count };
    }
    if count == 1 {
        return SplitSummary { mean: values[0], std_err: 0.0, count };
    }
    let (mean, sd) = mean_sd(values);
    SplitSummary { mean, std_err: sd / (count as f64).sqrt(), count }
}

/// KDE log densities on a grid: entry `(i, j)` is at input row `i` of `x_grid` and target `y_grid[j]`.
pub fn density_grid(model: &DgpModel, x_grid: &DMatrix<f64>, y_grid: &[f64], s: usize, stream: &RngStream) -> Result<DMatrix<f64>> {
    if x_grid.nrows() == 0 || y_grid.is_empty() {
        return Err(Error::Config("density grids must be non-empty".into()));
    }
    let set = predict_samples(model, x_grid, s, stream)?;
    let mut out = DMatrix::zeros(x_grid.nrows(), y_grid.len());
    for i in 0..x_grid.nrows() {
        let pts = sorted(&set.point(i));
        let h = silverman_bandwidth(&pts)?;
        for (j, &y) in y_grid.iter().enumerate() {
            out[(i, j)] = kde_sorted(&pts, y, h);
        }
    }
    Ok(out)
}
