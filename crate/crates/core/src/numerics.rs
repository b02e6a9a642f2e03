//! Dense linear algebra helpers, log-domain reductions and keyed random streams.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter escalation used when a Cholesky factorization fails.
///
/// The first attempt adds no jitter. Subsequent attempts add
/// `start * mean_diag`, multiplied by `factor` each time, up to `max * mean_diag`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub start: f64,
    pub factor: f64,
    pub max: f64,
    /// A pivot must exceed `pivot_tol * mean_diag` to count as positive.
    pub pivot_tol: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy { start: 1e-8, factor: 10.0, max: 1e-4, pivot_tol: 1e-10 }
    }
}

impl JitterPolicy {
    /// Absolute jitter values tried in order for a matrix with the given mean diagonal.
    pub fn schedule(&self, mean_diag: f64) -> Vec<f64> {
        let mut out = vec![0.0];
        let mut rel = self.start;
        while rel <= self.max * (1.0 + 1e-9) {
            out.push(rel * mean_diag);
            rel *= self.factor;
        }
        out
    }
}

/// A lower-triangular Cholesky factor together with the jitter that was needed.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

/// Symmetric positive semi-definite matrix with its factorization record.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix {
    pub entries: DMatrix<f64>,
    pub jitter_applied: f64,
}

impl PsdMatrix {
    pub fn new(entries: DMatrix<f64>) -> Self {
        PsdMatrix { entries, jitter_applied: 0.0 }
    }

    /// Factorizes in place of record, storing the jitter that was applied.
    pub fn factor(&mut self, policy: &JitterPolicy) -> Result<DMatrix<f64>> {
        let f = cholesky_psd(&self.entries, policy)?;
        self.jitter_applied = f.jitter;
        Ok(f.l)
    }
}

/// Plain Cholesky of `a + jitter * I` reading only the lower triangle.
/// Returns `None` when a pivot falls below `min_pivot`.
pub(crate) fn cholesky_with(a: &DMatrix<f64>, jitter: f64, min_pivot: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > min_pivot) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Cholesky factorization with jitter escalation.
pub fn cholesky_psd(a: &DMatrix<f64>, policy: &JitterPolicy) -> Result<CholeskyFactor> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let mean_diag = a.diagonal().sum() / n as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
    }
    let min_pivot = policy.pivot_tol * mean_diag;
    let schedule = policy.schedule(mean_diag);
    for &jitter in &schedule {
        if let Some(l) = cholesky_with(a, jitter, min_pivot) {
            return Ok(CholeskyFactor { l, jitter });
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter: *schedule.last().unwrap() })
}

/// Solves `l x = b` (or `lᵀ x = b` when `transposed`).
pub fn tri_solve(l: &DMatrix<f64>, b: &DMatrix<f64>, transposed: bool) -> Result<DMatrix<f64>> {
    if l.nrows() != l.ncols() || l.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "triangular solve of {}x{} against {}x{}",
            l.nrows(),
            l.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    for i in 0..l.nrows() {
        let v = l[(i, i)];
        if !(v > 0.0) {
            return Err(Error::SingularTriangular { index: i, value: v });
        }
    }
    let mut x = b.clone();
    if transposed {
        solve_upper_t_in_place(l, &mut x);
    } else {
        solve_lower_in_place(l, &mut x);
    }
    Ok(x)
}

/// Forward substitution, column oriented so `l` is read contiguously.
pub(crate) fn solve_lower_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for j in 0..b.ncols() {
        let mut col = b.column_mut(j);
        for k in 0..n {
            let xk = col[k] / l[(k, k)];
            col[k] = xk;
            if xk != 0.0 {
                let lk = l.column(k);
                for i in (k + 1)..n {
                    col[i] -= lk[i] * xk;
                }
            }
        }
    }
}

/// Back substitution with `lᵀ`.
pub(crate) fn solve_upper_t_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for j in 0..b.ncols() {
        let mut col = b.column_mut(j);
        for k in (0..n).rev() {
            let lk = l.column(k);
            let mut s = col[k];
            for i in (k + 1)..n {
                s -= lk[i] * col[i];
            }
            col[k] = s / lk[k];
        }
    }
}

/// `log Σ exp(vᵢ)` with max-subtraction. Panics on an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "log_sum_exp of an empty slice");
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// `log((1/n) Σ exp(vᵢ))`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values) - (values.len() as f64).ln()
}

/// Identifies one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct StreamKey {
    pub step: u64,
    pub datapoint: u64,
    pub sample: u32,
    pub layer: u32,
}

/// Counter-based random stream: the draws are a pure function of `(seed, key)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub key: StreamKey,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, key: StreamKey::default() }
    }

    pub fn with_key(self, step: u64, datapoint: u64, sample: u32, layer: u32) -> Self {
        RngStream { seed: self.seed, key: StreamKey { step, datapoint, sample, layer } }
    }

    pub fn at_step(self, step: u64) -> Self {
        RngStream { key: StreamKey { step, ..self.key }, ..self }
    }

    /// A ChaCha generator whose 256-bit seed is the injective packing of the key.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.key.step.to_le_bytes());
        bytes[16..24].copy_from_slice(&self.key.datapoint.to_le_bytes());
        bytes[24..28].copy_from_slice(&self.key.sample.to_le_bytes());
        bytes[28..32].copy_from_slice(&self.key.layer.to_le_bytes());
        ChaCha8Rng::from_seed(bytes)
    }
}

/// Deterministic standard-normal draws for the given stream.
pub fn draw_standard_normal(stream: &RngStream, count: usize) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Linear-interpolated quantile of sorted data (same convention as numpy's default).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::*;
    use proptest::prelude::*;

    mod approx_eq {
        pub fn rel_frob(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
            (a - b).norm() / b.norm().max(1e-300)
        }
    }

    fn random_pd(n: usize, seed: u64) -> DMatrix<f64> {
        let draws = draw_standard_normal(&RngStream::new(seed), n * n);
        let g = DMatrix::from_vec(n, n, draws);
        &g * g.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn cholesky_identity_needs_no_jitter() {
        let f = cholesky_psd(&DMatrix::identity(3, 3), &JitterPolicy::default()).unwrap();
        assert_eq!(f.l, DMatrix::identity(3, 3));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn cholesky_closed_form_2x2() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = cholesky_psd(&a, &JitterPolicy::default()).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert!((f.l[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((f.l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((f.l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(f.l[(0, 1)], 0.0);
    }

    #[test]
    fn cholesky_singular_takes_smallest_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let policy = JitterPolicy::default();
        let f = cholesky_psd(&a, &policy).unwrap();
        assert_eq!(f.jitter, policy.schedule(1.0)[1]);
        let rebuilt = &f.l * f.l.transpose();
        let target = &a + DMatrix::identity(2, 2) * f.jitter;
        assert!(rel_frob(&rebuilt, &target) < 1e-8);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_psd(&a, &JitterPolicy::default()),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_reconstructs_random_pd() {
        for seed in 0..20 {
            let a = random_pd(6, seed);
            let f = cholesky_psd(&a, &JitterPolicy::default()).unwrap();
            let target = &a + DMatrix::identity(6, 6) * f.jitter;
            assert!(rel_frob(&(&f.l * f.l.transpose()), &target) < 1e-8);
        }
    }

    #[test]
    fn tri_solve_cases() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(tri_solve(&DMatrix::identity(3, 3), &b, false).unwrap(), b);
        let l = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.0]);
        let x = tri_solve(&l, &DMatrix::from_column_slice(2, 1, &[2.0, 3.0]), false).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(tri_solve(&bad, &x, false), Err(Error::SingularTriangular { index: 0, .. })));
    }

    #[test]
    fn tri_solve_matches_dense_inverse() {
        let a = random_pd(5, 11);
        let l = cholesky_psd(&a, &JitterPolicy::default()).unwrap().l;
        let b = DMatrix::from_vec(5, 3, draw_standard_normal(&RngStream::new(12), 15));
        let linv = l.clone().try_inverse().unwrap();
        let x = tri_solve(&l, &b, false).unwrap();
        assert!(rel_frob(&x, &(&linv * &b)) < 1e-10);
        let xt = tri_solve(&l, &b, true).unwrap();
        assert!(rel_frob(&xt, &(linv.transpose() * &b)) < 1e-10);
    }

    #[test]
    fn log_sum_exp_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-3.25]), -3.25);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]).abs() < 1e-15);
    }

    #[test]
    fn normal_stream_is_deterministic() {
        let s = RngStream::new(7).with_key(1, 2, 3, 4);
        assert_eq!(draw_standard_normal(&s, 16), draw_standard_normal(&s, 16));
        assert_ne!(
            draw_standard_normal(&s, 4),
            draw_standard_normal(&s.with_key(1, 2, 3, 5), 4)
        );
    }

    #[test]
    fn normal_stream_moments_and_independence() {
        let n = 1_000_000;
        let a = draw_standard_normal(&RngStream::new(1).with_key(0, 0, 0, 0), n);
        let b = draw_standard_normal(&RngStream::new(1).with_key(0, 1, 0, 0), n);
        let mean = a.iter().sum::<f64>() / n as f64;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
        let mb = b.iter().sum::<f64>() / n as f64;
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n as f64;
        let cov = a.iter().zip(&b).map(|(x, y)| (x - mean) * (y - mb)).sum::<f64>() / n as f64;
        let rho = cov / (var * vb).sqrt();
        assert!(rho.abs() < 0.01, "rho {rho}");
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6, 0.01, 1.0, 5.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn log_sum_exp_shift(v in proptest::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted);
            let rhs = log_sum_exp(&v) + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }
}
