//! Squared-exponential (RBF) kernel with ARD lengthscales, linear mean functions,
//! and the output projection that correlates latent GPs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{sq_exp_cross_value, Tape, Var};

/// `k(x, x') = variance · exp(-½ Σ_d (x_d − x'_d)² / ℓ_d²)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub variance: f64,
    pub lengthscales: DVector<f64>,
}

impl KernelParams {
    pub fn new(variance: f64, lengthscales: DVector<f64>) -> Self {
        KernelParams { variance, lengthscales }
    }

    /// Lengthscales set to `√D`, unit variance.
    pub fn default_for_dim(dim: usize) -> Self {
        KernelParams {
            variance: 1.0,
            lengthscales: DVector::from_element(dim, (dim as f64).sqrt()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "kernel expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn scaled(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = x.clone();
        for (d, &l) in self.lengthscales.iter().enumerate() {
            s.column_mut(d).scale_mut(1.0 / l);
        }
        s
    }
}

/// Cross-covariance matrix between the rows of `x` and `x2`.
pub fn kernel_matrix(k: &KernelParams, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    k.check(x)?;
    k.check(x2)?;
    let mut m = sq_exp_cross_value(&k.scaled(x), &k.scaled(x2));
    m *= k.variance;
    Ok(m)
}

/// `k(x_i, x_i)` for every row; constant because the kernel is noise free.
pub fn kernel_diag(k: &KernelParams, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    k.check(x)?;
    Ok(DVector::from_element(x.nrows(), k.variance))
}

/// Affine map `x ↦ W x + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMean {
    /// output dim × input dim
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearMean {
    pub fn identity(dim: usize) -> Self {
        LinearMean { weight: DMatrix::identity(dim, dim), bias: DVector::zeros(dim) }
    }

    pub fn zero(out_dim: usize, in_dim: usize) -> Self {
        LinearMean { weight: DMatrix::zeros(out_dim, in_dim), bias: DVector::zeros(out_dim) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Rows of `x` mapped through the mean function.
pub fn mean_eval(m: &LinearMean, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != m.input_dim() || m.bias.len() != m.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "mean function {}→{} applied to {} columns",
            m.input_dim(),
            m.output_dim(),
            x.ncols()
        )));
    }
    let mut out = x * m.weight.transpose();
    for (j, &b) in m.bias.iter().enumerate() {
        out.column_mut(j).add_scalar_mut(b);
    }
    Ok(out)
}

/// Mixes `E` independent latent GPs into the observed outputs: `out = P f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputProjection {
    /// observed-output dim × E
    pub p: DMatrix<f64>,
}

impl OutputProjection {
    pub fn identity(dim: usize) -> Self {
        OutputProjection { p: DMatrix::identity(dim, dim) }
    }

    pub fn num_latent(&self) -> usize {
        self.p.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.p.nrows()
    }

    /// Covariance of the stacked outputs, `(PᵀP) ⊗ K` in latent-major order.
    pub fn stacked_covariance(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        self.p.tr_mul(&self.p).kronecker(k)
    }
}

/// Tape form of `variance · exp(-½‖(a_i − b_j)/ℓ‖²)` for already scaled inputs.
pub(crate) fn tape_kernel_cross(tape: &mut Tape, variance: Var, a_scaled: Var, b_scaled: Var) -> Var {
    let k = tape.sq_exp_cross(a_scaled, b_scaled);
    tape.scalar_mul(variance, k)
}
