//! Latent-variable layer: appends per-datapoint covariates `w_n ~ N(0, I)` to its input.
//!
//! The posterior `q(w_n) = N(a_n, diag b_n)` is either stored per datapoint or
//! produced by a small encoder network from `(x_n, y_n)`.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::tape::{Tape, Var};

pub const ENCODER_HIDDEN: usize = 10;
/// Initial bias of the log standard deviation head.
pub const ENCODER_LOG_STD_BIAS: f64 = -5.0;

/// Fully connected tanh network with a residual connection around the second hidden layer.
///
/// `h1 = tanh(u W0 + c0)`, `h2 = h1 + tanh(h1 W1 + c1)`, `out = h2 W2 + c2`,
/// where the first `L` output columns are the means and the last `L` the log standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderNet {
    /// input dim × output dim per layer
    pub weights: Vec<DMatrix<f64>>,
    /// 1 × output dim per layer
    pub biases: Vec<DMatrix<f64>>,
}

impl EncoderNet {
    /// Glorot-uniform weights, zero biases except the log-std head.
    pub fn new(input_dim: usize, latent_dim: usize, stream: &RngStream) -> Self {
        let dims = [input_dim, ENCODER_HIDDEN, ENCODER_HIDDEN, 2 * latent_dim];
        let mut rng = stream.rng();
        let mut weights = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for l in 0..3 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let u = Uniform::new_inclusive(-r, r).expect("finite Glorot range");
            weights.push(DMatrix::from_fn(fan_in, fan_out, |_, _| u.sample(&mut rng)));
            biases.push(DMatrix::zeros(1, fan_out));
        }
        for j in latent_dim..2 * latent_dim {
            biases[2][(0, j)] = ENCODER_LOG_STD_BIAS;
        }
        EncoderNet { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.weights[2].ncols() / 2
    }
}

/// Encoder parameters as tape nodes.
#[derive(Debug, Clone)]
pub(crate) struct EncoderVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl EncoderVars {
    pub fn leaves(tape: &mut Tape, net: &EncoderNet) -> Self {
        EncoderVars {
            weights: net.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: net.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }
}

/// `(a, b)` for every row of `input`, each rows × latent_dim.
pub(crate) fn encoder_tape(tape: &mut Tape, vars: &EncoderVars, input: Var) -> (Var, Var) {
    let dense = |tape: &mut Tape, x: Var, l: usize| {
        let xw = tape.matmul(x, vars.weights[l]);
        tape.add_row(xw, vars.biases[l])
    };
    let z0 = dense(tape, input, 0);
    let h1 = tape.tanh(z0);
    let z1 = dense(tape, h1, 1);
    let t1 = tape.tanh(z1);
    let h2 = tape.add(h1, t1);
    let out = dense(tape, h2, 2);
    let l = tape.shape(out).1 / 2;
    let a = tape.slice_cols(out, 0, l);
    let log_std = tape.slice_cols(out, l, l);
    let two = tape.scale(log_std, 2.0);
    let b = tape.exp(two);
    (a, b)
}

/// Posterior mean and variance of `w` for one datapoint.
pub fn encoder_forward(net: &EncoderNet, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let input: Vec<f64> = x.iter().chain(y).copied().collect();
    let (a, b) = encoder_batch(net, &DMatrix::from_row_slice(1, input.len(), &input));
    (a.row(0).iter().copied().collect(), b.row(0).iter().copied().collect())
}

/// Batched [`encoder_forward`] over the rows of `[x, y]`.
pub fn encoder_batch(net: &EncoderNet, input: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut tape = Tape::new();
    let vars = EncoderVars::leaves(&mut tape, net);
    let u = tape.leaf(input.clone());
    let (a, b) = encoder_tape(&mut tape, &vars, u);
    (tape.value(a).clone(), tape.value(b).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LvPosterior {
    /// N × latent_dim tables of means and variances
    PerPoint { a: DMatrix<f64>, b: DMatrix<f64> },
    Amortized { encoder: EncoderNet },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvLayer {
    pub latent_dim: usize,
    pub posterior: LvPosterior,
}

/// Initial per-point posterior variance; matches the encoder's initial `exp(2 · bias)`.
pub const PER_POINT_INITIAL_VARIANCE: f64 = 4.5399929762484854e-5;

impl LvLayer {
    /// Per-point posterior with means drawn from the prior and small variances.
    pub fn per_point(latent_dim: usize, n: usize, stream: &RngStream) -> Result<Self> {
        check_latent_dim(latent_dim)?;
        let a = crate::numerics::draw_standard_normal(stream, n * latent_dim);
        Ok(LvLayer {
            latent_dim,
            posterior: LvPosterior::PerPoint {
                a: DMatrix::from_vec(n, latent_dim, a),
                b: DMatrix::from_element(n, latent_dim, PER_POINT_INITIAL_VARIANCE),
            },
        })
    }

    pub fn amortized(latent_dim: usize, encoder_input_dim: usize, stream: &RngStream) -> Result<Self> {
        check_latent_dim(latent_dim)?;
        Ok(LvLayer {
            latent_dim,
            posterior: LvPosterior::Amortized { encoder: EncoderNet::new(encoder_input_dim, latent_dim, stream) },
        })
    }

    pub fn is_amortized(&self) -> bool {
        matches!(self.posterior, LvPosterior::Amortized { .. })
    }
}

fn check_latent_dim(latent_dim: usize) -> Result<()> {
    if latent_dim == 0 {
        return Err(Error::Config("latent dimension must be at least 1".into()));
    }
    Ok(())
}

fn check_variances(b: &[f64]) -> Result<()> {
    match b.iter().find(|v| !(**v > 0.0)) {
        Some(&v) => Err(Error::NonPositiveVariance(v)),
        None => Ok(()),
    }
}

/// `[x, w]`
pub fn lv_concat(x: &[f64], w: &[f64]) -> Vec<f64> {
    x.iter().chain(w).copied().collect()
}

/// Splits `[x, w]` back into its parts.
pub fn lv_split(row: &[f64], latent_dim: usize) -> (&[f64], &[f64]) {
    row.split_at(row.len() - latent_dim)
}

/// `w = a + eps · √b`
pub fn lv_sample_q(a: &[f64], b: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    check_variances(b)?;
    Ok(a.iter().zip(b).zip(eps).map(|((a, b), e)| a + e * b.sqrt()).collect())
}

/// `log N(w | 0, I) − log N(w | a, diag b)`
pub fn lv_log_ratio(w: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
    check_variances(b)?;
    Ok(w.iter()
        .zip(a)
        .zip(b)
        .map(|((w, a), b)| -0.5 * w * w + 0.5 * b.ln() + 0.5 * (w - a) * (w - a) / b)
        .sum())
}

/// `KL(N(a, diag b) ‖ N(0, I))`
pub fn lv_kl(a: &[f64], b: &[f64]) -> Result<f64> {
    check_variances(b)?;
    Ok(a.iter().zip(b).map(|(a, b)| 0.5 * (b + a * a - 1.0 - b.ln())).sum())
}

/// Reparameterized draw on the tape; `eps` is a constant with the shape of `a`.
pub(crate) fn sample_q_tape(tape: &mut Tape, a: Var, b: Var, eps: Var) -> Var {
    let sd = tape.sqrt(b);
    let noise = tape.mul(sd, eps);
    tape.add(a, noise)
}

/// Per-row log ratio, rows × 1. Uses `(w − a)² / b = eps²`, exact for reparameterized draws.
pub(crate) fn log_ratio_tape(tape: &mut Tape, w: Var, b: Var, eps: &DMatrix<f64>) -> Var {
    let w2 = tape.square(w);
    let t1 = tape.scale(w2, -0.5);
    let lb = tape.ln(b);
    let t2 = tape.scale(lb, 0.5);
    let s = tape.add(t1, t2);
    let rows = tape.sum_rows(s);
    let half_eps2 = DMatrix::from_fn(eps.nrows(), 1, |i, _| 0.5 * eps.row(i).norm_squared());
    let c = tape.leaf(half_eps2);
    tape.add(rows, c)
}

/// Per-row KL to the prior, rows × 1.
pub(crate) fn kl_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let a2 = tape.square(a);
    let lb = tape.ln(b);
    let s = tape.add(b, a2);
    let s = tape.sub(s, lb);
    let s = tape.offset(s, -1.0);
    let rows = tape.sum_rows(s);
    tape.scale(rows, 0.5)
}
