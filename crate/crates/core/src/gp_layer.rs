//! Sparse variational GP layer.
//!
//! `q(u) = N(m, S)` over the inducing outputs, one Gaussian per latent output,
//! induces `q(f) = GP(μ, Σ)` with
//! `μ(x) = k(x)ᵀ K̃⁻¹ m` and `Σ(x, x') = k(x, x') − k(x)ᵀ K̃⁻¹ (K̃ − S) K̃⁻¹ k(x')`.
//! The latent outputs are mixed by the projection `P` and shifted by the linear mean.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{tape_kernel_cross, KernelParams, LinearMean, OutputProjection};
use crate::numerics::{cholesky_psd, JitterPolicy};
use crate::tape::{Groups, Tape, Var};

/// Marginal variances below `-NEG_VARIANCE_TOL * kernel variance` are an error; above, clamped to 0.
pub const NEG_VARIANCE_TOL: f64 = 1e-10;

/// Diagonal floor of the inducing covariance, relative to the kernel variance:
/// `K̃ = k(Z, Z) + KUU_FLOOR · variance · I`. Keeps the bound smooth where `k(Z, Z)`
/// is numerically singular, so jitter escalation never switches inside an optimization.
pub const KUU_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    z: DMatrix<f64>,
}

impl InducingSet {
    pub fn new(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::Config("at least one inducing point is required".into()));
        }
        for i in 0..z.nrows() {
            for j in 0..i {
                if (z.row(i) - z.row(j)).norm() <= 1e-10 {
                    return Err(Error::Config(format!("inducing rows {j} and {i} coincide")));
                }
            }
        }
        Ok(InducingSet { z })
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Replace the locations keeping the row count.
    pub fn set_z(&mut self, z: DMatrix<f64>) -> Result<()> {
        if z.shape() != self.z.shape() {
            return Err(Error::DimensionMismatch("inducing locations change shape".into()));
        }
        self.z = z;
        Ok(())
    }
}

/// Gaussian over inducing outputs, one independent `N(m_e, L_e L_eᵀ)` per latent output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariationalU {
    /// M × E
    pub mean: DMatrix<f64>,
    /// E lower-triangular M × M factors with positive diagonals.
    pub cov_sqrt: Vec<DMatrix<f64>>,
}

impl GaussianVariationalU {
    /// Zero mean and `scale · I` square roots.
    pub fn isotropic(m: usize, e: usize, scale: f64) -> Self {
        GaussianVariationalU {
            mean: DMatrix::zeros(m, e),
            cov_sqrt: vec![DMatrix::identity(m, m) * scale; e],
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.mean.nrows()
    }

    pub fn num_latent(&self) -> usize {
        self.mean.ncols()
    }

    pub fn cov(&self, e: usize) -> DMatrix<f64> {
        &self.cov_sqrt[e] * self.cov_sqrt[e].transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpLayer {
    pub kernel: KernelParams,
    pub inducing: InducingSet,
    pub qu: GaussianVariationalU,
    pub mean: LinearMean,
    pub projection: OutputProjection,
}

impl GpLayer {
    pub fn new(
        kernel: KernelParams,
        inducing: InducingSet,
        qu: GaussianVariationalU,
        mean: LinearMean,
        projection: OutputProjection,
    ) -> Result<Self> {
        let layer = GpLayer { kernel, inducing, qu, mean, projection };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.kernel.input_dim();
        let m = self.inducing.len();
        let e = self.projection.num_latent();
        let mismatch = |what: String| Err(Error::DimensionMismatch(what));
        if self.inducing.input_dim() != d {
            return mismatch(format!("inducing inputs have {} columns, kernel has {d}", self.inducing.input_dim()));
        }
        if self.mean.input_dim() != d || self.mean.output_dim() != self.projection.output_dim() {
            return mismatch("mean function does not conform to layer".into());
        }
        if self.qu.mean.shape() != (m, e) || self.qu.cov_sqrt.len() != e {
            return mismatch(format!("q(u) must hold {e} outputs over {m} inducing points"));
        }
        if self.qu.cov_sqrt.iter().any(|l| l.shape() != (m, m)) {
            return mismatch("q(u) square root has the wrong shape".into());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn num_latent(&self) -> usize {
        self.projection.num_latent()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    /// Inducing-point covariance `K̃`, floored by [`KUU_FLOOR`].
    pub fn kuu(&self) -> DMatrix<f64> {
        let m = self.num_inducing();
        crate::kernels::kernel_matrix(&self.kernel, self.inducing.z(), self.inducing.z())
            .expect("inducing dimension validated at construction")
            + DMatrix::identity(m, m) * (KUU_FLOOR * self.kernel.variance)
    }

    /// Sets `q(u)` to the prior: `m = 0`, `S = K̃`. A switched-off layer (zero kernel variance) is left as is.
    pub fn set_q_to_prior(&mut self) -> Result<()> {
        if self.kernel.variance == 0.0 {
            return Ok(());
        }
        let l = cholesky_psd(&self.kuu(), &JitterPolicy::default())?.l;
        let e = self.num_latent();
        self.qu.mean = DMatrix::zeros(self.num_inducing(), e);
        self.qu.cov_sqrt = vec![l; e];
        Ok(())
    }
}

/// How `q(u)`'s covariance enters the tape.
#[derive(Debug, Clone)]
pub(crate) enum CovVars {
    /// Lower-triangular square roots `L_e`, `S_e = L_e L_eᵀ`.
    Sqrt(Vec<Var>),
    /// Full covariances `S_e` (used for natural gradients).
    Full(Vec<Var>),
}

/// A GP layer's nodes on a tape.
#[derive(Debug, Clone)]
pub(crate) struct GpVars {
    pub variance: Var,
    pub lengthscales: Var,
    pub z: Var,
    pub q_mean: Var,
    pub q_cov: CovVars,
    pub mean_weight_t: Var,
    pub mean_bias: Var,
    pub projection_t: Var,
    /// the exact kernel variance is zero: the layer is its mean function
    pub switched_off: bool,
    pub kernel_variance: f64,
}

impl GpVars {
    /// Every parameter as a fresh leaf, covariance as square roots.
    pub fn constants(tape: &mut Tape, layer: &GpLayer) -> Self {
        let q_cov = CovVars::Sqrt(layer.qu.cov_sqrt.iter().map(|l| tape.leaf(l.clone())).collect());
        GpVars::with_cov(tape, layer, q_cov)
    }

    pub fn with_cov(tape: &mut Tape, layer: &GpLayer, q_cov: CovVars) -> Self {
        let variance = tape.constant_scalar(layer.kernel.variance);
        let lengthscales = tape.leaf(DMatrix::from_row_slice(1, layer.kernel.lengthscales.len(), layer.kernel.lengthscales.as_slice()));
        let z = tape.leaf(layer.inducing.z().clone());
        let q_mean = tape.leaf(layer.qu.mean.clone());
        GpVars::assemble(tape, layer, variance, lengthscales, z, q_mean, q_cov)
    }

    pub fn assemble(
        tape: &mut Tape,
        layer: &GpLayer,
        variance: Var,
        lengthscales: Var,
        z: Var,
        q_mean: Var,
        q_cov: CovVars,
    ) -> Self {
        let mean_weight_t = tape.leaf(layer.mean.weight.transpose());
        let mean_bias = tape.leaf(DMatrix::from_row_slice(1, layer.mean.bias.len(), layer.mean.bias.as_slice()));
        let projection_t = tape.leaf(layer.projection.p.transpose());
        GpVars {
            variance,
            lengthscales,
            z,
            q_mean,
            q_cov,
            mean_weight_t,
            mean_bias,
            projection_t,
            switched_off: layer.kernel.variance == 0.0,
            kernel_variance: layer.kernel.variance,
        }
    }
}

/// Shared quantities of `q(f)` at a set of inputs.
pub(crate) struct Conditional {
    /// C × E
    pub latent_mean: Var,
    /// `L⁻¹ k(Z, X)`, M × C
    pub v: Var,
    /// `K̃⁻¹ k(Z, X)`, M × C
    pub aq: Var,
    /// `S_e K̃⁻¹ k(Z, X)` per output
    pub sa: Vec<Var>,
    /// inputs divided by the lengthscales
    pub hs: Var,
}

fn tape_kuu(tape: &mut Tape, vars: &GpVars, zs: Var) -> Var {
    let m = tape.shape(zs).0;
    let c = tape.sq_exp_cross(zs, zs);
    let floor = tape.leaf(DMatrix::identity(m, m) * KUU_FLOOR);
    let c = tape.add(c, floor);
    tape.scalar_mul(vars.variance, c)
}

pub(crate) fn conditional(tape: &mut Tape, vars: &GpVars, h: Var) -> Result<Conditional> {
    let inv_ls = tape.recip(vars.lengthscales);
    let zs = tape.mul_row(vars.z, inv_ls);
    let hs = tape.mul_row(h, inv_ls);
    let kzz = tape_kuu(tape, vars, zs);
    let l = tape.cholesky(kzz)?;
    let kzx = tape_kernel_cross(tape, vars.variance, zs, hs);
    let v = tape.tri_solve(l, kzx, false);
    let aq = tape.tri_solve(l, v, true);
    let latent_mean = tape.matmul_tn(aq, vars.q_mean);
    let covs: Vec<Var> = match &vars.q_cov {
        CovVars::Full(s) => s.clone(),
        CovVars::Sqrt(ls) => ls
            .iter()
            .map(|&lv| {
                let lt = tape.transpose(lv);
                tape.matmul(lv, lt)
            })
            .collect(),
    };
    let sa = covs.iter().map(|&s| tape.matmul(s, aq)).collect();
    Ok(Conditional { latent_mean, v, aq, sa, hs })
}

/// Within-group posterior covariance blocks of latent output `e`.
pub(crate) fn latent_blocks(tape: &mut Tape, vars: &GpVars, cond: &Conditional, e: usize, groups: &Arc<Groups>) -> Var {
    let kxx0 = tape.group_sq_exp(cond.hs, groups.clone());
    let kxx = tape.scalar_mul(vars.variance, kxx0);
    let q = tape.group_gram(cond.v, cond.v, groups.clone());
    let r = tape.group_gram(cond.aq, cond.sa[e], groups.clone());
    let d = tape.sub(kxx, q);
    tape.add(d, r)
}

/// `F Pᵀ + H Wᵀ + b`; `latent = None` means the GP part is switched off.
fn observe(tape: &mut Tape, vars: &GpVars, h: Var, latent: Option<Var>) -> Var {
    let hw = tape.matmul(h, vars.mean_weight_t);
    let mean = tape.add_row(hw, vars.mean_bias);
    match latent {
        Some(f) => {
            let fp = tape.matmul(f, vars.projection_t);
            tape.add(fp, mean)
        }
        None => mean,
    }
}

/// Marginal `(mean, variance)` of the observed layer outputs at the rows of `h`.
/// Variances may carry roundoff below zero, bounded by [`NEG_VARIANCE_TOL`].
pub(crate) fn marginal_tape(tape: &mut Tape, vars: &GpVars, h: Var) -> Result<(Var, Var)> {
    let c = tape.shape(h).0;
    let d_out = tape.shape(vars.projection_t).1;
    if vars.switched_off {
        let mean = observe(tape, vars, h, None);
        let var = tape.leaf(DMatrix::zeros(c, d_out));
        return Ok((mean, var));
    }
    let cond = conditional(tape, vars, h)?;
    let groups = Arc::new(Groups::singletons(c));
    let e_count = cond.sa.len();
    let mut vars_e = Vec::with_capacity(e_count);
    for e in 0..e_count {
        let blk = latent_blocks(tape, vars, &cond, e, &groups);
        if tape.value(blk).iter().any(|&v| v.is_nan() || v < -NEG_VARIANCE_TOL * vars.kernel_variance) {
            return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
        }
        vars_e.push(blk);
    }
    let latent_var = tape.concat_cols(&vars_e);
    let mean = observe(tape, vars, h, Some(cond.latent_mean));
    // independent latents: var_d = Σ_e P_de² var_e
    let pt2 = tape.square(vars.projection_t);
    let var = tape.matmul(latent_var, pt2);
    Ok((mean, var))
}

/// Per-group unique rows: `(gather index into h, compressed groups, scatter index back)`.
fn dedup_groups(h: &DMatrix<f64>, groups: &Groups) -> Option<(Vec<usize>, Groups, Vec<usize>)> {
    let mut keep = Vec::with_capacity(h.nrows());
    let mut lens = Vec::with_capacity(groups.len());
    let mut back = vec![0usize; h.nrows()];
    let mut any = false;
    for (s, n) in groups.iter() {
        let first = keep.len();
        for i in s..s + n {
            let dup = (first..keep.len()).find(|&u| h.row(keep[u]) == h.row(i));
            match dup {
                Some(u) => {
                    back[i] = u;
                    any = true;
                }
                None => {
                    back[i] = keep.len();
                    keep.push(i);
                }
            }
        }
        lens.push(keep.len() - first);
    }
    any.then(|| (keep, Groups::from_lens(lens), back))
}

/// Joint sample of the observed outputs, one function draw per group.
///
/// `eps` is C × E. Rows that are exact copies within a group share one value,
/// drawn with the noise of their first occurrence.
pub(crate) fn sample_tape(tape: &mut Tape, vars: &GpVars, h: Var, groups: &Arc<Groups>, eps: Var) -> Result<Var> {
    if vars.switched_off {
        return Ok(observe(tape, vars, h, None));
    }
    if groups.max_len() > 1 {
        if let Some((keep, compressed, back)) = dedup_groups(tape.value(h), groups) {
            let keep: Arc<[usize]> = Arc::from(keep);
            let hu = tape.gather_rows(h, keep.clone());
            let eu = tape.gather_rows(eps, keep);
            let out = sample_tape(tape, vars, hu, &Arc::new(compressed), eu)?;
            return Ok(tape.gather_rows(out, Arc::from(back)));
        }
    }
    let cond = conditional(tape, vars, h)?;
    let e_count = cond.sa.len();
    let mut cols = Vec::with_capacity(e_count);
    for e in 0..e_count {
        let blk = latent_blocks(tape, vars, &cond, e, groups);
        let l = tape.group_chol(blk, groups.clone(), NEG_VARIANCE_TOL * vars.kernel_variance)?;
        let eps_e = tape.slice_cols(eps, e, 1);
        let noise = tape.group_mat_vec(l, eps_e, groups.clone());
        let mean_e = tape.slice_cols(cond.latent_mean, e, 1);
        cols.push(tape.add(mean_e, noise));
    }
    let f = tape.concat_cols(&cols);
    Ok(observe(tape, vars, h, Some(f)))
}

/// `Σ_e KL(N(m_e, S_e) ‖ N(0, K̃))` on the tape.
pub(crate) fn kl_tape(tape: &mut Tape, vars: &GpVars) -> Result<Var> {
    let inv_ls = tape.recip(vars.lengthscales);
    let zs = tape.mul_row(vars.z, inv_ls);
    let kzz = tape_kuu(tape, vars, zs);
    let l = tape.cholesky(kzz)?;
    let (m, e_count) = tape.shape(vars.q_mean);
    let sqrts: Vec<Var> = match &vars.q_cov {
        CovVars::Sqrt(ls) => ls.clone(),
        CovVars::Full(s) => s.iter().map(|&sv| tape.cholesky(sv)).collect::<Result<_>>()?,
    };
    let linv_m = tape.tri_solve(l, vars.q_mean, false);
    let msq = tape.square(linv_m);
    let mut total = tape.sum(msq);
    let logdet_k = tape.log_diag_sum(l);
    for ls in sqrts {
        let a = tape.tri_solve(l, ls, false);
        let asq = tape.square(a);
        let tr = tape.sum(asq);
        total = tape.add(total, tr);
        let ld = tape.log_diag_sum(ls);
        let ld2 = tape.scale(ld, -2.0);
        total = tape.add(total, ld2);
    }
    let lk = tape.scale(logdet_k, 2.0 * e_count as f64);
    total = tape.add(total, lk);
    let total = tape.offset(total, -((m * e_count) as f64));
    Ok(tape.scale(total, 0.5))
}

/// Marginal mean and variance of the layer outputs at the rows of `x`.
pub fn layer_marginal(layer: &GpLayer, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_inputs(layer, x)?;
    let mut tape = Tape::new();
    let vars = GpVars::constants(&mut tape, layer);
    let h = tape.leaf(x.clone());
    let (m, v) = marginal_tape(&mut tape, &vars, h)?;
    Ok((tape.value(m).clone(), tape.value(v).map(|s| s.max(0.0))))
}

/// Independent reparameterized samples: `mean + eps ⊙ √var` per latent output, then projected.
pub fn layer_sample(layer: &GpLayer, x: &DMatrix<f64>, eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_inputs(layer, x)?;
    check_eps(layer, x.nrows(), eps)?;
    let groups = Arc::new(Groups::singletons(x.nrows()));
    run_sample(layer, x, eps, &groups)
}

/// One joint function draw evaluated at all rows of `x_group` (the K copies of a datapoint).
pub fn layer_sample_correlated(layer: &GpLayer, x_group: &DMatrix<f64>, eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_inputs(layer, x_group)?;
    check_eps(layer, x_group.nrows(), eps)?;
    if x_group.nrows() == 0 {
        return Err(Error::DimensionMismatch("empty sample group".into()));
    }
    let groups = Arc::new(Groups::uniform(1, x_group.nrows()));
    run_sample(layer, x_group, eps, &groups)
}

fn run_sample(layer: &GpLayer, x: &DMatrix<f64>, eps: &DMatrix<f64>, groups: &Arc<Groups>) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new();
    let vars = GpVars::constants(&mut tape, layer);
    let h = tape.leaf(x.clone());
    let e = tape.leaf(eps.clone());
    let out = sample_tape(&mut tape, &vars, h, groups, e)?;
    Ok(tape.value(out).clone())
}

/// `KL(q(u) ‖ p(u))` summed over latent outputs.
pub fn layer_kl(layer: &GpLayer) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = GpVars::constants(&mut tape, layer);
    let kl = kl_tape(&mut tape, &vars)?;
    Ok(tape.scalar(kl))
}

/// Full posterior covariance of latent output `e` over the rows of `x` (dense; for small inputs).
pub fn latent_posterior_cov(layer: &GpLayer, x: &DMatrix<f64>, e: usize) -> Result<DMatrix<f64>> {
    check_inputs(layer, x)?;
    let mut tape = Tape::new();
    let vars = GpVars::constants(&mut tape, layer);
    let h = tape.leaf(x.clone());
    let cond = conditional(&mut tape, &vars, h)?;
    let groups = Arc::new(Groups::uniform(1, x.nrows()));
    let blk = latent_blocks(&mut tape, &vars, &cond, e, &groups);
    Ok(tape.value(blk).clone())
}

fn check_inputs(layer: &GpLayer, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != layer.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "layer expects {} input columns, got {}",
            layer.input_dim(),
            x.ncols()
        )));
    }
    Ok(())
}

fn check_eps(layer: &GpLayer, rows: usize, eps: &DMatrix<f64>) -> Result<()> {
    if eps.shape() != (rows, layer.num_latent()) {
        return Err(Error::DimensionMismatch(format!(
            "noise must be {rows}x{}, got {}x{}",
            layer.num_latent(),
            eps.nrows(),
            eps.ncols()
        )));
    }
    Ok(())
}

/// A single-output layer with identity projection and the given mean.
pub fn scalar_layer(kernel: KernelParams, z: DMatrix<f64>, mean: LinearMean) -> Result<GpLayer> {
    let m = z.nrows();
    GpLayer::new(
        kernel,
        InducingSet::new(z)?,
        GaussianVariationalU::isotropic(m, 1, 1.0),
        mean,
        OutputProjection::identity(1),
    )
}

/// Zero mean function from `d_in` to `d_out`.
pub fn zero_mean(d_out: usize, d_in: usize) -> LinearMean {
    LinearMean { weight: DMatrix::zeros(d_out, d_in), bias: DVector::zeros(d_out) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{draw_standard_normal, RngStream};

    fn rand_mat(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        DMatrix::from_vec(r, c, draw_standard_normal(&RngStream::new(seed), r * c))
    }

    fn random_layer(m: usize, d: usize, seed: u64) -> GpLayer {
        let kernel = KernelParams::new(1.3, DVector::from_element(d, 0.9));
        let mut layer = scalar_layer(kernel, rand_mat(m, d, seed), zero_mean(1, d)).unwrap();
        layer.qu.mean = rand_mat(m, 1, seed + 1) * 0.5;
        let mut l = rand_mat(m, m, seed + 2).lower_triangle() * 0.3;
        for i in 0..m {
            l[(i, i)] = l[(i, i)].abs() + 0.2;
        }
        layer.qu.cov_sqrt = vec![l];
        layer
    }

    #[test]
    fn prior_q_gives_prior_marginal() {
        let mut layer = random_layer(5, 2, 1);
        layer.set_q_to_prior().unwrap();
        let x = rand_mat(7, 2, 9);
        let (m, v) = layer_marginal(&layer, &x).unwrap();
        assert!(m.amax() < 1e-10);
        for i in 0..7 {
            assert!((v[(i, 0)] - 1.3).abs() < 1e-8, "{}", v[(i, 0)]);
        }
        assert!(layer_kl(&layer).unwrap().abs() < 1e-8);
    }

    #[test]
    fn variance_vanishes_at_inducing_point_when_s_is_tiny() {
        let mut layer = random_layer(4, 1, 3);
        layer.qu.cov_sqrt = vec![DMatrix::identity(4, 4) * 1e-6];
        let x = layer.inducing.z().rows(1, 1).into_owned();
        let (_, v) = layer_marginal(&layer, &x).unwrap();
        // only the diagonal floor remains
        assert!(v[(0, 0)] < 2.0 * KUU_FLOOR * layer.kernel.variance, "{}", v[(0, 0)]);
    }

    #[test]
    fn scalar_kl_closed_form() {
        // K̃ = [1] exactly
        let kernel = KernelParams::new(1.0 / (1.0 + KUU_FLOOR), DVector::from_element(1, 1.0));
        let mut layer = scalar_layer(kernel, DMatrix::zeros(1, 1), zero_mean(1, 1)).unwrap();
        layer.qu.mean = DMatrix::from_element(1, 1, 1.0);
        layer.qu.cov_sqrt = vec![DMatrix::from_element(1, 1, 1.0)];
        assert!((layer_kl(&layer).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_only_at_prior() {
        let mut layer = random_layer(3, 1, 5);
        layer.set_q_to_prior().unwrap();
        assert!(layer_kl(&layer).unwrap().abs() < 1e-8);
        let mut shifted = layer.clone();
        shifted.qu.mean[(0, 0)] = 0.01;
        assert!(layer_kl(&shifted).unwrap() > 1e-8);
        let mut squeezed = layer.clone();
        squeezed.qu.cov_sqrt[0] *= 0.99;
        assert!(layer_kl(&squeezed).unwrap() > 1e-8);
    }

    #[test]
    fn half_prior_cov_bounds_variance() {
        let mut layer = random_layer(5, 2, 7);
        layer.set_q_to_prior().unwrap();
        layer.qu.cov_sqrt[0] *= 0.5f64.sqrt();
        let x = rand_mat(30, 2, 8) * 2.0;
        let (_, v) = layer_marginal(&layer, &x).unwrap();
        assert!(v.iter().all(|&s| s <= 1.3 + 1e-10));
    }

    #[test]
    fn sample_with_zero_and_unit_noise() {
        let layer = random_layer(4, 2, 11);
        let x = rand_mat(3, 2, 12);
        let (m, v) = layer_marginal(&layer, &x).unwrap();
        let s0 = layer_sample(&layer, &x, &DMatrix::zeros(3, 1)).unwrap();
        assert_eq!(s0, m);
        let s1 = layer_sample(&layer, &x, &DMatrix::from_element(3, 1, 1.0)).unwrap();
        for i in 0..3 {
            assert!((s1[(i, 0)] - m[(i, 0)] - v[(i, 0)].sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn correlated_with_one_copy_matches_independent() {
        let layer = random_layer(4, 2, 13);
        let x = rand_mat(1, 2, 14);
        let eps = DMatrix::from_element(1, 1, 0.7);
        assert_eq!(
            layer_sample_correlated(&layer, &x, &eps).unwrap(),
            layer_sample(&layer, &x, &eps).unwrap()
        );
    }

    #[test]
    fn duplicated_inputs_share_a_value() {
        let layer = random_layer(4, 2, 15);
        let row = rand_mat(1, 2, 16);
        let x = DMatrix::from_fn(2, 2, |_, j| row[(0, j)]);
        let eps = DMatrix::from_vec(2, 1, vec![0.3, -1.7]);
        let s = layer_sample_correlated(&layer, &x, &eps).unwrap();
        assert_eq!(s[(0, 0)], s[(1, 0)]);
    }

    #[test]
    fn marginals_are_pointwise() {
        let layer = random_layer(4, 2, 17);
        let x = rand_mat(5, 2, 18);
        let (m, v) = layer_marginal(&layer, &x).unwrap();
        let (m3, v3) = layer_marginal(&layer, &x.rows(0, 3).into_owned()).unwrap();
        for i in 0..3 {
            assert!((m[(i, 0)] - m3[(i, 0)]).abs() < 1e-13);
            assert!((v[(i, 0)] - v3[(i, 0)]).abs() < 1e-13);
        }
    }

    #[test]
    fn sample_is_continuous_in_input() {
        let layer = random_layer(4, 1, 19);
        let x = DMatrix::from_element(1, 1, 0.3);
        let eps = DMatrix::from_element(1, 1, 1.1);
        let a = layer_sample(&layer, &x, &eps).unwrap();
        let b = layer_sample(&layer, &x.add_scalar(1e-6), &eps).unwrap();
        assert!((a[(0, 0)] - b[(0, 0)]).abs() < 1e-4);
    }

    // Independent dense oracle built from nalgebra's own factorization.
    fn oracle_moments(layer: &GpLayer, x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let z = layer.inducing.z();
        let m = z.nrows();
        let kzz = crate::kernels::kernel_matrix(&layer.kernel, z, z).unwrap() + DMatrix::identity(m, m) * (KUU_FLOOR * layer.kernel.variance);
        let kzx = crate::kernels::kernel_matrix(&layer.kernel, z, x).unwrap();
        let kxx = crate::kernels::kernel_matrix(&layer.kernel, x, x).unwrap();
        let kinv = kzz.clone().cholesky().unwrap().inverse();
        let a = &kinv * &kzx;
        let s = layer.qu.cov(0);
        let mean = a.transpose() * layer.qu.mean.column(0);
        let cov = &kxx - kzx.transpose() * &a + a.transpose() * s * &a;
        (mean, cov)
    }

    fn empirical(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let n = samples.len() as f64;
        let mean = samples.iter().fold(DVector::zeros(samples[0].len()), |acc, s| acc + s) / n;
        let mut cov = DMatrix::zeros(mean.len(), mean.len());
        for s in samples {
            let d = s - &mean;
            cov += &d * d.transpose();
        }
        (mean, cov / (n - 1.0))
    }

    fn assert_within_3se(mean: &DVector<f64>, cov: &DMatrix<f64>, target_mean: &DVector<f64>, target_cov: &DMatrix<f64>, n: usize) {
        let n = n as f64;
        for i in 0..mean.len() {
            let se = (target_cov[(i, i)] / n).sqrt();
            assert!((mean[i] - target_mean[i]).abs() < 3.0 * se, "mean {i}: {} vs {}", mean[i], target_mean[i]);
            for j in 0..mean.len() {
                let se = ((target_cov[(i, i)] * target_cov[(j, j)] + target_cov[(i, j)].powi(2)) / n).sqrt();
                assert!((cov[(i, j)] - target_cov[(i, j)]).abs() < 3.0 * se, "cov {i},{j}: {} vs {}", cov[(i, j)], target_cov[(i, j)]);
            }
        }
    }

    #[test]
    fn marginal_matches_sample_then_condition() {
        let layer = random_layer(5, 2, 21);
        let x = rand_mat(4, 2, 22);
        let z = layer.inducing.z();
        let kzz = crate::kernels::kernel_matrix(&layer.kernel, z, z).unwrap() + DMatrix::identity(5, 5) * (KUU_FLOOR * layer.kernel.variance);
        let kzx = crate::kernels::kernel_matrix(&layer.kernel, z, &x).unwrap();
        let kinv = kzz.clone().cholesky().unwrap().inverse();
        let a = &kinv * &kzx;
        let cond_var: Vec<f64> = (0..4).map(|i| layer.kernel.variance - kzx.column(i).dot(&a.column(i))).collect();
        let n = 100_000;
        let eu = draw_standard_normal(&RngStream::new(23), n * 5);
        let ef = draw_standard_normal(&RngStream::new(24), n * 4);
        let ls = &layer.qu.cov_sqrt[0];
        let mut per_point: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 4];
        for t in 0..n {
            let u = layer.qu.mean.column(0) + ls * DVector::from_column_slice(&eu[5 * t..5 * t + 5]);
            for i in 0..4 {
                let f = a.column(i).dot(&u) + ef[4 * t + i] * cond_var[i].max(0.0).sqrt();
                per_point[i].push(f);
            }
        }
        let (m, v) = layer_marginal(&layer, &x).unwrap();
        for i in 0..4 {
            let s = &per_point[i];
            let mean = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let tv = v[(i, 0)];
            assert!((mean - m[(i, 0)]).abs() < 3.0 * (tv / n as f64).sqrt());
            assert!((var - tv).abs() < 3.0 * (2.0 * tv * tv / (n - 1) as f64).sqrt());
        }
    }

    #[test]
    fn independent_samples_match_marginal_moments() {
        let layer = random_layer(5, 2, 25);
        let x = rand_mat(3, 2, 26);
        let (m, v) = layer_marginal(&layer, &x).unwrap();
        let n = 100_000;
        let eps = DMatrix::from_vec(3, n, draw_standard_normal(&RngStream::new(27), 3 * n));
        let mut samples = Vec::with_capacity(n);
        let xs = DMatrix::from_fn(3 * n, 2, |r, c| x[(r % 3, c)]);
        let out = layer_sample(&layer, &xs, &DMatrix::from_column_slice(3 * n, 1, eps.as_slice())).unwrap();
        for t in 0..n {
            samples.push(DVector::from_fn(3, |i, _| out[(3 * t + i, 0)]));
        }
        let (em, ec) = empirical(&samples);
        let target_cov = DMatrix::from_diagonal(&v.column(0).into_owned());
        assert_within_3se(&em, &ec, &m.column(0).into_owned(), &target_cov, n);
    }

    #[test]
    fn correlated_samples_match_posterior_covariance() {
        let layer = random_layer(5, 2, 28);
        let x = rand_mat(3, 2, 29) * 0.5;
        let (om, oc) = oracle_moments(&layer, &x);
        let dense = latent_posterior_cov(&layer, &x, 0).unwrap();
        assert!((&dense - &oc).amax() < 1e-10);
        let n = 100_000;
        let eps = draw_standard_normal(&RngStream::new(30), 3 * n);
        let mut tape = Tape::new();
        let vars = GpVars::constants(&mut tape, &layer);
        let xs = tape.leaf(DMatrix::from_fn(3 * n, 2, |r, c| x[(r % 3, c)]));
        let e = tape.leaf(DMatrix::from_vec(3 * n, 1, eps));
        let out = sample_tape(&mut tape, &vars, xs, &Arc::new(Groups::uniform(n, 3)), e).unwrap();
        let out = tape.value(out);
        let samples: Vec<DVector<f64>> = (0..n).map(|t| DVector::from_fn(3, |i, _| out[(3 * t + i, 0)])).collect();
        let (em, ec) = empirical(&samples);
        assert_within_3se(&em, &ec, &om, &oc, n);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let layer = random_layer(4, 1, 31);
        let kzz = layer.kuu();
        let lp = kzz.clone().cholesky().unwrap();
        let lq = layer.qu.cov_sqrt[0].clone();
        let m = layer.qu.mean.column(0).into_owned();
        let logdet_p: f64 = 2.0 * lp.l().diagonal().map(f64::ln).sum();
        let logdet_q: f64 = 2.0 * lq.diagonal().map(f64::ln).sum();
        let n = 1_000_000;
        let eps = draw_standard_normal(&RngStream::new(32), 4 * n);
        let mut vals = Vec::with_capacity(n);
        for t in 0..n {
            let e = DVector::from_column_slice(&eps[4 * t..4 * t + 4]);
            let u = &m + &lq * &e;
            let log_q = -0.5 * e.norm_squared() - 0.5 * logdet_q;
            let log_p = -0.5 * u.dot(&lp.solve(&u)) - 0.5 * logdet_p;
            vals.push(log_q - log_p);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let kl = layer_kl(&layer).unwrap();
        assert!((mean - kl).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {kl}");
    }

    #[test]
    fn rejects_wrong_shapes() {
        let layer = random_layer(3, 2, 20);
        assert!(layer_marginal(&layer, &rand_mat(2, 3, 1)).is_err());
        assert!(layer_sample(&layer, &rand_mat(2, 2, 1), &rand_mat(2, 2, 1)).is_err());
        assert!(InducingSet::new(DMatrix::zeros(2, 1)).is_err());
    }
}
