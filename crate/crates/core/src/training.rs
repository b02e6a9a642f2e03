//! Parameter flattening, gradients, optimizers and the training loop.
//!
//! Positive quantities are stored as `raw` with `value = softplus(raw) + 1e-6`.
//! Square roots of `q(u)` keep their strict lower triangle free and their diagonal positive.
//! The final layer's `q(u)` can instead be updated by natural gradient steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounds::{objective_tape, Batch, BoundEstimate, Objective, ObjectiveConfig};
use crate::data::minibatches;
use crate::error::{Error, Result};
use crate::gp_layer::{CovVars, GaussianVariationalU};
use crate::lv_layer::LvPosterior;
use crate::model::{DgpModel, Layer, LayerVars, LvVars, ModelVars};
use crate::numerics::{sigmoid, softplus, softplus_inv, RngStream};
use crate::tape::{Tape, Var};

/// Lower bound added to every positive parameter.
pub const POSITIVE_FLOOR: f64 = 1e-6;

/// Where a parameter group lives in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    KernelVariance { layer: usize },
    Lengthscales { layer: usize },
    Inducing { layer: usize },
    QMean { layer: usize },
    QSqrt { layer: usize, output: usize },
    MeanWeight { layer: usize },
    MeanBias { layer: usize },
    Projection { layer: usize },
    LatentMean { layer: usize },
    LatentVariance { layer: usize },
    EncoderWeight { layer: usize, index: usize },
    EncoderBias { layer: usize, index: usize },
    LikelihoodVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// `softplus(raw) + POSITIVE_FLOOR`, elementwise
    Positive,
    /// lower triangle only (column-major), positive diagonal
    LowerTriangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub slot: Slot,
    pub shape: (usize, usize),
    pub transform: Transform,
    pub trainable: bool,
    pub offset: usize,
    pub len: usize,
}

/// Unconstrained values of every parameter group, concatenated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub groups: Vec<ParamGroup>,
    pub values: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamOptions {
    pub optimize_inducing: bool,
}

fn slot_value(model: &DgpModel, slot: Slot) -> DMatrix<f64> {
    let gp = |l: usize| match &model.layers[l] {
        Layer::Gp(g) => g,
        _ => unreachable!("slot refers to a GP layer"),
    };
    let lv = |l: usize| match &model.layers[l] {
        Layer::Lv(v) => &v.posterior,
        _ => unreachable!("slot refers to a latent layer"),
    };
    let row = |v: &DVector<f64>| DMatrix::from_row_slice(1, v.len(), v.as_slice());
    match slot {
        Slot::KernelVariance { layer } => DMatrix::from_element(1, 1, gp(layer).kernel.variance),
        Slot::Lengthscales { layer } => row(&gp(layer).kernel.lengthscales),
        Slot::Inducing { layer } => gp(layer).inducing.z().clone(),
        Slot::QMean { layer } => gp(layer).qu.mean.clone(),
        Slot::QSqrt { layer, output } => gp(layer).qu.cov_sqrt[output].clone(),
        Slot::MeanWeight { layer } => gp(layer).mean.weight.clone(),
        Slot::MeanBias { layer } => row(&gp(layer).mean.bias),
        Slot::Projection { layer } => gp(layer).projection.p.clone(),
        Slot::LatentMean { layer } => match lv(layer) {
            LvPosterior::PerPoint { a, .. } => a.clone(),
            _ => unreachable!(),
        },
        Slot::LatentVariance { layer } => match lv(layer) {
            LvPosterior::PerPoint { b, .. } => b.clone(),
            _ => unreachable!(),
        },
        Slot::EncoderWeight { layer, index } => match lv(layer) {
            LvPosterior::Amortized { encoder } => encoder.weights[index].clone(),
            _ => unreachable!(),
        },
        Slot::EncoderBias { layer, index } => match lv(layer) {
            LvPosterior::Amortized { encoder } => encoder.biases[index].clone(),
            _ => unreachable!(),
        },
        Slot::LikelihoodVariance => DMatrix::from_element(1, 1, model.likelihood_variance),
    }
}

fn set_slot_value(model: &mut DgpModel, slot: Slot, v: DMatrix<f64>) -> Result<()> {
    let row_vec = |m: &DMatrix<f64>| DVector::from_iterator(m.len(), m.iter().copied());
    match slot {
        Slot::LikelihoodVariance => {
            model.likelihood_variance = v[(0, 0)];
            return Ok(());
        }
        Slot::KernelVariance { layer }
        | Slot::Lengthscales { layer }
        | Slot::Inducing { layer }
        | Slot::QMean { layer }
        | Slot::QSqrt { layer, .. }
        | Slot::MeanWeight { layer }
        | Slot::MeanBias { layer }
        | Slot::Projection { layer } => {
            let Layer::Gp(g) = &mut model.layers[layer] else { unreachable!("slot refers to a GP layer") };
            match slot {
                Slot::KernelVariance { .. } => g.kernel.variance = v[(0, 0)],
                Slot::Lengthscales { .. } => g.kernel.lengthscales = row_vec(&v),
                Slot::Inducing { .. } => g.inducing.set_z(v)?,
                Slot::QMean { .. } => g.qu.mean = v,
                Slot::QSqrt { output, .. } => g.qu.cov_sqrt[output] = v,
                Slot::MeanWeight { .. } => g.mean.weight = v,
                Slot::MeanBias { .. } => g.mean.bias = row_vec(&v),
                Slot::Projection { .. } => g.projection.p = v,
                _ => unreachable!(),
            }
        }
        Slot::LatentMean { layer } | Slot::LatentVariance { layer } | Slot::EncoderWeight { layer, .. } | Slot::EncoderBias { layer, .. } => {
            let Layer::Lv(lv) = &mut model.layers[layer] else { unreachable!("slot refers to a latent layer") };
            match (&mut lv.posterior, slot) {
                (LvPosterior::PerPoint { a, .. }, Slot::LatentMean { .. }) => *a = v,
                (LvPosterior::PerPoint { b, .. }, Slot::LatentVariance { .. }) => *b = v,
                (LvPosterior::Amortized { encoder }, Slot::EncoderWeight { index, .. }) => encoder.weights[index] = v,
                (LvPosterior::Amortized { encoder }, Slot::EncoderBias { index, .. }) => encoder.biases[index] = v,
                _ => unreachable!(),
            }
        }
    }
    Ok(())
}

fn free_len(shape: (usize, usize), t: Transform) -> usize {
    match t {
        Transform::LowerTriangular => shape.0 * (shape.0 + 1) / 2,
        _ => shape.0 * shape.1,
    }
}

fn to_raw_positive(c: f64) -> f64 {
    softplus_inv((c - POSITIVE_FLOOR).max(1e-300))
}

impl ParamVector {
    /// Every parameter of `model`; mean functions and projections are frozen.
    pub fn from_model(model: &DgpModel, opts: &ParamOptions) -> Self {
        let mut specs: Vec<(String, Slot, Transform, bool)> = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            match layer {
                Layer::Gp(g) => {
                    // a switched-off layer stays off
                    let on = g.kernel.variance > 0.0;
                    specs.push((format!("layer{l}.kernel_variance"), Slot::KernelVariance { layer: l }, Transform::Positive, on));
                    specs.push((format!("layer{l}.lengthscales"), Slot::Lengthscales { layer: l }, Transform::Positive, on));
                    specs.push((format!("layer{l}.inducing"), Slot::Inducing { layer: l }, Transform::Identity, on && opts.optimize_inducing));
                    specs.push((format!("layer{l}.q_mean"), Slot::QMean { layer: l }, Transform::Identity, on));
                    for e in 0..g.num_latent() {
                        specs.push((format!("layer{l}.q_sqrt{e}"), Slot::QSqrt { layer: l, output: e }, Transform::LowerTriangular, on));
                    }
                    specs.push((format!("layer{l}.mean_weight"), Slot::MeanWeight { layer: l }, Transform::Identity, false));
                    specs.push((format!("layer{l}.mean_bias"), Slot::MeanBias { layer: l }, Transform::Identity, false));
                    specs.push((format!("layer{l}.projection"), Slot::Projection { layer: l }, Transform::Identity, false));
                }
                Layer::Lv(lv) => match &lv.posterior {
                    LvPosterior::PerPoint { .. } => {
                        specs.push((format!("layer{l}.latent_mean"), Slot::LatentMean { layer: l }, Transform::Identity, true));
                        specs.push((format!("layer{l}.latent_variance"), Slot::LatentVariance { layer: l }, Transform::Positive, true));
                    }
                    LvPosterior::Amortized { encoder } => {
                        for i in 0..encoder.weights.len() {
                            specs.push((format!("layer{l}.encoder_w{i}"), Slot::EncoderWeight { layer: l, index: i }, Transform::Identity, true));
                            specs.push((format!("layer{l}.encoder_b{i}"), Slot::EncoderBias { layer: l, index: i }, Transform::Identity, true));
                        }
                    }
                },
            }
        }
        specs.push(("likelihood.variance".into(), Slot::LikelihoodVariance, Transform::Positive, true));

        let mut groups = Vec::with_capacity(specs.len());
        let mut values = Vec::new();
        for (name, slot, transform, trainable) in specs {
            let v = slot_value(model, slot);
            let shape = v.shape();
            let offset = values.len();
            match transform {
                Transform::Identity => values.extend(v.iter().copied()),
                Transform::Positive => values.extend(v.iter().map(|&c| to_raw_positive(c))),
                Transform::LowerTriangular => {
                    for j in 0..shape.1 {
                        for i in j..shape.0 {
                            values.push(if i == j { to_raw_positive(v[(i, j)]) } else { v[(i, j)] });
                        }
                    }
                }
            }
            let len = free_len(shape, transform);
            groups.push(ParamGroup { name, slot, shape, transform, trainable, offset, len });
        }
        ParamVector { groups, values: DVector::from_vec(values) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn raw(&self, g: &ParamGroup) -> &[f64] {
        &self.values.as_slice()[g.offset..g.offset + g.len]
    }

    /// The group's value in model space.
    pub fn constrained(&self, g: &ParamGroup) -> DMatrix<f64> {
        let raw = self.raw(g);
        let (r, c) = g.shape;
        match g.transform {
            Transform::Identity => DMatrix::from_column_slice(r, c, raw),
            Transform::Positive => DMatrix::from_iterator(r, c, raw.iter().map(|&x| softplus(x) + POSITIVE_FLOOR)),
            Transform::LowerTriangular => {
                let mut m = DMatrix::zeros(r, c);
                let mut k = 0;
                for j in 0..c {
                    for i in j..r {
                        m[(i, j)] = if i == j { softplus(raw[k]) + POSITIVE_FLOOR } else { raw[k] };
                        k += 1;
                    }
                }
                m
            }
        }
    }

    /// Writes every trainable group into `model`; frozen groups are left untouched.
    pub fn apply(&self, model: &mut DgpModel) -> Result<()> {
        for g in self.groups.iter().filter(|g| g.trainable) {
            set_slot_value(model, g.slot, self.constrained(g))?;
        }
        Ok(())
    }

    /// Re-reads `group` from `model`.
    pub fn sync_group(&mut self, model: &DgpModel, name: &str) {
        let fresh = ParamVector::from_model(model, &ParamOptions::default());
        let (Some(dst), Some(src)) = (self.group(name).cloned(), fresh.group(name)) else { return };
        self.values.rows_mut(dst.offset, dst.len).copy_from(&fresh.values.rows(src.offset, src.len));
    }

    /// Maps a gradient with respect to a constrained value onto the group's free entries.
    fn chain(&self, g: &ParamGroup, grad: &DMatrix<f64>, out: &mut [f64]) {
        let raw = self.raw(g);
        match g.transform {
            Transform::Identity => out.copy_from_slice(grad.as_slice()),
            Transform::Positive => {
                for (k, (o, gr)) in out.iter_mut().zip(grad.iter()).enumerate() {
                    *o = gr * sigmoid(raw[k]);
                }
            }
            Transform::LowerTriangular => {
                let mut k = 0;
                for j in 0..g.shape.1 {
                    for i in j..g.shape.0 {
                        out[k] = if i == j { grad[(i, j)] * sigmoid(raw[k]) } else { grad[(i, j)] };
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Reverse sweep from `out`, returning the gradient over every free entry.
/// `group_vars[i]` is the node holding group `i`'s constrained value, if it is on the tape.
/// Frozen groups get zeros.
pub(crate) fn backprop(params: &ParamVector, tape: &Tape, out: Var, group_vars: &[Option<Var>]) -> Result<DVector<f64>> {
    let grads = tape.backward(out);
    let mut flat = DVector::zeros(params.len());
    for (g, v) in params.groups.iter().zip(group_vars) {
        if !g.trainable {
            continue;
        }
        let Some(v) = v else { continue };
        let gm = grads.get_or_zeros(*v, g.shape);
        if gm.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { group: g.name.clone() });
        }
        params.chain(g, &gm, &mut flat.as_mut_slice()[g.offset..g.offset + g.len]);
    }
    Ok(flat)
}

/// Gradient of the scalar built by `objective` with respect to the free entries of `params`.
///
/// `objective` receives one leaf per group holding its constrained value and returns the output node.
pub fn gradient<F>(params: &ParamVector, objective: F) -> Result<(f64, DVector<f64>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.groups.iter().map(|g| tape.leaf(params.constrained(g))).collect();
    let out = objective(&mut tape, &leaves)?;
    let vars: Vec<Option<Var>> = leaves.into_iter().map(Some).collect();
    let grad = backprop(params, &tape, out, &vars)?;
    Ok((tape.scalar(out), grad))
}

fn slot_var(vars: &ModelVars, slot: Slot) -> Option<Var> {
    let gp = |l: usize| match &vars.layers[l] {
        LayerVars::Gp(g) => g,
        _ => unreachable!(),
    };
    match slot {
        Slot::KernelVariance { layer } => Some(gp(layer).variance),
        Slot::Lengthscales { layer } => Some(gp(layer).lengthscales),
        Slot::Inducing { layer } => Some(gp(layer).z),
        Slot::QMean { layer } => Some(gp(layer).q_mean),
        Slot::QSqrt { layer, output } => match &gp(layer).q_cov {
            CovVars::Sqrt(v) => Some(v[output]),
            CovVars::Full(_) => None,
        },
        Slot::MeanWeight { .. } | Slot::MeanBias { .. } | Slot::Projection { .. } => None,
        Slot::LatentMean { layer } | Slot::LatentVariance { layer } | Slot::EncoderWeight { layer, .. } | Slot::EncoderBias { layer, .. } => {
            match (&vars.layers[layer], slot) {
                (LayerVars::Lv(LvVars::PerPoint { a, .. }), Slot::LatentMean { .. }) => Some(*a),
                (LayerVars::Lv(LvVars::PerPoint { b, .. }), Slot::LatentVariance { .. }) => Some(*b),
                (LayerVars::Lv(LvVars::Amortized(e)), Slot::EncoderWeight { index, .. }) => Some(e.weights[index]),
                (LayerVars::Lv(LvVars::Amortized(e)), Slot::EncoderBias { index, .. }) => Some(e.biases[index]),
                _ => None,
            }
        }
        Slot::LikelihoodVariance => Some(vars.noise),
    }
}

/// Gradients of the final layer's objective with respect to `m` and each `S_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovGradients {
    pub mean: DMatrix<f64>,
    pub cov: Vec<DMatrix<f64>>,
}

/// Objective value, its gradient over `params`, and (when `final_natural`) the
/// final layer's `(∂/∂m, ∂/∂S)` for a natural gradient step.
pub fn objective_gradient(
    model: &DgpModel,
    params: &ParamVector,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    stream: &RngStream,
    final_natural: bool,
) -> Result<(BoundEstimate, DVector<f64>, Option<CovGradients>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::leaves(&mut tape, model, final_natural);
    let obj = objective_tape(&mut tape, model, &vars, batch, cfg, stream)?;
    let group_vars: Vec<Option<Var>> = params.groups.iter().map(|g| slot_var(&vars, g.slot)).collect();
    let grad = backprop(params, &tape, obj.value, &group_vars)?;
    let natural = if final_natural {
        let grads = tape.backward(obj.value);
        let fv = vars.final_gp();
        let fl = model.final_layer();
        let mean = grads.get_or_zeros(fv.q_mean, fl.qu.mean.shape());
        let CovVars::Full(s) = &fv.q_cov else { unreachable!("final covariance requested in full form") };
        let m = fl.num_inducing();
        let cov: Vec<DMatrix<f64>> = s.iter().map(|&v| grads.get_or_zeros(v, (m, m))).collect();
        if mean.iter().chain(cov.iter().flat_map(|c| c.iter())).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { group: format!("layer{}.q", model.layers.len() - 1) });
        }
        Some(CovGradients { mean, cov })
    } else {
        None
    };
    Ok((obj.estimate(&tape), grad, natural))
}

/// Adaptive-moment state for minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: DVector::zeros(n), v: DVector::zeros(n), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One descent step on the entries where `mask` is true (all entries when `None`).
pub fn adam_step(params: &mut DVector<f64>, grad: &DVector<f64>, state: &mut AdamState, lr: f64, mask: Option<&[bool]>) {
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

pub const MAX_HALVINGS: usize = 10;

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let c = sym(a).cholesky()?;
    if c.l().diagonal().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return None;
    }
    Some(sym(&c.inverse()))
}

/// Natural-gradient ascent on `q(u) = N(m_e, S_e)` per output.
///
/// Takes a step of `lr` along the objective's gradient with respect to the expectation
/// parameters `(m, S + m mᵀ)`, applied to the natural parameters `(S⁻¹m, −½S⁻¹)`.
/// Halves the step while the new precision is not positive definite.
pub fn natgrad_update(qu: &GaussianVariationalU, grads: &CovGradients, lr: f64) -> Result<GaussianVariationalU> {
    if lr == 0.0 {
        return Ok(qu.clone());
    }
    let e_count = qu.num_latent();
    let mut step = lr;
    'halving: for halvings in 0..=MAX_HALVINGS {
        if halvings > 0 {
            step *= 0.5;
        }
        let mut mean = qu.mean.clone();
        let mut cov_sqrt = Vec::with_capacity(e_count);
        for e in 0..e_count {
            let s = qu.cov(e);
            let m = qu.mean.column(e).into_owned();
            let Some(prec) = spd_inverse(&s) else { return Err(Error::NotPositiveDefinite { max_jitter: 0.0 }) };
            let g_s = sym(&grads.cov[e]);
            let g_m = grads.mean.column(e).into_owned();
            let d_eta1 = &g_m - (&g_s * &m) * 2.0;
            let theta1 = &prec * &m + d_eta1 * step;
            let prec_new = &prec - &g_s * (2.0 * step);
            let Some(s_new) = spd_inverse(&prec_new) else { continue 'halving };
            let Some(l_new) = s_new.clone().cholesky() else { continue 'halving };
            mean.set_column(e, &(&s_new * theta1));
            cov_sqrt.push(l_new.l());
        }
        return Ok(GaussianVariationalU { mean, cov_sqrt });
    }
    Err(Error::StepRejected { halvings: MAX_HALVINGS })
}

/// Natural-gradient step for an objective of `(m, [S_e])` built on a tape.
pub fn natgrad_step<F>(qu: &GaussianVariationalU, objective: F, lr: f64) -> Result<GaussianVariationalU>
where
    F: FnOnce(&mut Tape, Var, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let m = tape.leaf(qu.mean.clone());
    let s: Vec<Var> = (0..qu.num_latent()).map(|e| tape.leaf(qu.cov(e))).collect();
    let out = objective(&mut tape, m, &s)?;
    let grads = tape.backward(out);
    let k = qu.num_inducing();
    let cg = CovGradients {
        mean: grads.get_or_zeros(m, qu.mean.shape()),
        cov: s.iter().map(|&v| grads.get_or_zeros(v, (k, k))).collect(),
    };
    natgrad_update(qu, &cg, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam_lr: f64,
    pub natgrad_lr: f64,
    pub anneal_factor: f64,
    pub anneal_every: usize,
    pub seed: u64,
    pub objective: Objective,
    pub k_samples: usize,
    /// natural gradients for the final layer's `q(u)`; Adam otherwise
    pub natural_gradients: bool,
    pub optimize_inducing: bool,
    /// record every `log_every` steps, and always the last
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 20_000,
            batch_size: 512,
            adam_lr: 0.005,
            natgrad_lr: 0.01,
            anneal_factor: 0.98,
            anneal_every: 1000,
            seed: 0,
            objective: Objective::Iwvi,
            k_samples: 5,
            natural_gradients: true,
            optimize_inducing: false,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam_lr > 0.0) || !(self.natgrad_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(Error::Config(format!("anneal factor {} outside (0, 1]", self.anneal_factor)));
        }
        if self.anneal_every == 0 || self.batch_size == 0 || self.log_every == 0 || self.k_samples == 0 {
            return Err(Error::Config("anneal interval, batch size, logging interval and K must be positive".into()));
        }
        Ok(())
    }

    /// Learning-rate multiplier in effect at `step`.
    pub fn anneal(&self, step: usize) -> f64 {
        self.anneal_factor.powi((step / self.anneal_every) as i32)
    }
}

/// One line of the metrics trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub objective: f64,
    pub data_fit: f64,
    pub latent_kl: f64,
    pub layer_kl: Vec<f64>,
    pub adam_lr: f64,
    pub natgrad_lr: f64,
}

/// Trains `model` in place on standardized `(x, y)`.
///
/// Each step draws a minibatch, evaluates the objective and its gradient, takes a natural
/// gradient step on the final layer's `q(u)` and an Adam step on every other trainable group.
/// On a non-finite gradient the model is left at its last finite state and the error returned.
pub fn train_with<O: TrainObserver>(model: &mut DgpModel, x: &DMatrix<f64>, y: &DVector<f64>, cfg: &TrainConfig, observer: &mut O) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let n = x.nrows();
    if n != y.len() || n == 0 {
        return Err(Error::DimensionMismatch(format!("{n} input rows, {} targets", y.len())));
    }
    let obj_cfg = ObjectiveConfig::new(cfg.objective, cfg.k_samples, n)?;
    let mut params = ParamVector::from_model(model, &ParamOptions { optimize_inducing: cfg.optimize_inducing });
    let last = model.layers.len() - 1;
    let natural_names: Vec<String> = if cfg.natural_gradients {
        params
            .groups
            .iter()
            .filter(|g| matches!(g.slot, Slot::QMean { layer } | Slot::QSqrt { layer, .. } if layer == last) && g.trainable)
            .map(|g| g.name.clone())
            .collect()
    } else {
        Vec::new()
    };
    let natural = !natural_names.is_empty();
    let mut mask = vec![false; params.len()];
    for g in &params.groups {
        if g.trainable && !natural_names.contains(&g.name) {
            mask[g.offset..g.offset + g.len].iter_mut().for_each(|m| *m = true);
        }
    }
    let mut adam = AdamState::new(params.len());
    let root = RngStream::new(cfg.seed);
    let mut batches = minibatches(n, cfg.batch_size, &root)?;
    let mut trace = Vec::new();
    for step in 0..cfg.total_steps {
        let idx = batches.next().expect("endless iterator");
        let batch = Batch::select(x, y, &idx);
        let stream = root.at_step(step as u64);
        let (est, grad, cov_grads) = objective_gradient(model, &params, &batch, &obj_cfg, &stream, natural)?;
        let factor = cfg.anneal(step);
        let (adam_lr, natgrad_lr) = (cfg.adam_lr * factor, cfg.natgrad_lr * factor);
        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            let rec = MetricRecord {
                step,
                objective: est.value,
                data_fit: est.data_fit,
                latent_kl: est.latent_kl,
                layer_kl: est.layer_kl.clone(),
                adam_lr,
                natgrad_lr,
            };
            observer.record(&rec);
            trace.push(rec);
        }
        let new_q = match &cov_grads {
            Some(cg) => Some(natgrad_update(&model.final_layer().qu, cg, natgrad_lr)?),
            None => None,
        };
        let neg = -grad;
        adam_step(&mut params.values, &neg, &mut adam, adam_lr, Some(&mask));
        params.apply(model)?;
        if let Some(q) = new_q {
            model.final_layer_mut().qu = q;
            for name in &natural_names {
                params.sync_group(model, name);
            }
        }
        observer.step_done(step + 1, model)?;
    }
    Ok(trace)
}

/// Hooks called by [`train_with`].
pub trait TrainObserver {
    /// A metrics record, computed before that step's update.
    fn record(&mut self, _record: &MetricRecord) {}

    /// The model after `steps_done` updates.
    fn step_done(&mut self, _steps_done: usize, _model: &DgpModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn train(model: &mut DgpModel, x: &DMatrix<f64>, y: &DVector<f64>, cfg: &TrainConfig) -> Result<Vec<MetricRecord>> {
    train_with(model, x, y, cfg, &mut ())
}
