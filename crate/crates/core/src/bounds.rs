//! Training objectives.
//!
//! * `Vi`: one reparameterized sample of everything but the final layer, whose
//!   expectation is analytic, minus closed-form KL terms.
//! * `Iwvi`: the analytic final-layer term inside a log-mean-exp over `K` importance
//!   copies of `w`, with the inner GPs drawn jointly across the copies.
//! * `IwaeFull`: as `Iwvi` but the final layer is sampled too.
//!
//! Per-datapoint sums are scaled by `N / |batch|`; GP-layer KL terms are charged once.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_layer;
use crate::model::{forward_tape, DgpModel, Draws, LatentSource, LayerVars, ModelVars, SampleMode};
use crate::numerics::RngStream;
use crate::tape::{Groups, Tape, Var};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Vi,
    IwaeFull,
    Iwvi,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vi" => Ok(Objective::Vi),
            "iwae" | "iwae_full" | "iwae-full" => Ok(Objective::IwaeFull),
            "iwvi" => Ok(Objective::Iwvi),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Vi => "vi",
            Objective::IwaeFull => "iwae",
            Objective::Iwvi => "iwvi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mode: Objective,
    pub k_samples: usize,
    pub train_size: usize,
}

impl ObjectiveConfig {
    /// `Vi` ignores `k_samples` and uses one sample.
    pub fn new(mode: Objective, k_samples: usize, train_size: usize) -> Result<Self> {
        if k_samples == 0 {
            return Err(Error::Config("at least one importance sample is required".into()));
        }
        if train_size == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let k_samples = if mode == Objective::Vi { 1 } else { k_samples };
        Ok(ObjectiveConfig { mode, k_samples, train_size })
    }

    pub fn scale(&self, batch_size: usize) -> f64 {
        self.train_size as f64 / batch_size as f64
    }
}

/// A minibatch: inputs, targets and each row's index in the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, indices: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() || y.len() != indices.len() || y.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "batch with {} inputs, {} targets and {} indices",
                x.nrows(),
                y.len(),
                indices.len()
            )));
        }
        Ok(Batch { x, y, indices })
    }

    /// Rows `idx` of the full data, keyed by their position there.
    pub fn select(x: &DMatrix<f64>, y: &DVector<f64>, idx: &[usize]) -> Self {
        Batch { x: x.select_rows(idx), y: y.select_rows(idx), indices: idx.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Rows reordered by training-set index, so every reduction runs in a fixed order.
    fn sorted(&self) -> Batch {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.indices[i]);
        Batch {
            x: self.x.select_rows(&order),
            y: self.y.select_rows(&order),
            indices: order.iter().map(|&i| self.indices[i]).collect(),
        }
    }
}

/// A bound value and its parts: `value = data_fit − latent_kl − Σ layer_kl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub value: f64,
    /// scaled per-datapoint data term
    pub data_fit: f64,
    /// scaled `Σ_n KL(q(w_n) ‖ p(w_n))`; zero for the importance-weighted objectives
    pub latent_kl: f64,
    /// one entry per GP layer, in model order
    pub layer_kl: Vec<f64>,
}

impl BoundEstimate {
    pub fn reassemble(&self) -> f64 {
        self.data_fit - self.latent_kl - self.layer_kl.iter().sum::<f64>()
    }
}

/// `E_{f ~ N(mean_f, var_f)} log N(y | f, sigma2)`
pub fn expected_loglik_gaussian(y: f64, mean_f: f64, var_f: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::NonPositiveNoise(sigma2));
    }
    if var_f < 0.0 {
        return Err(Error::NonPositiveVariance(var_f));
    }
    let r = y - mean_f;
    Ok(-0.5 * (LN_2PI + sigma2.ln()) - (r * r + var_f) / (2.0 * sigma2))
}

/// Tape form of [`expected_loglik_gaussian`] for columns `y`, `mean`, `var`; `noise` is 1×1.
pub(crate) fn expected_loglik_tape(tape: &mut Tape, y: Var, mean: Var, var: Var, noise: Var) -> Var {
    let r = tape.sub(y, mean);
    let r2 = tape.square(r);
    let t = tape.add(r2, var);
    let inv = tape.recip(noise);
    let t = tape.scalar_mul(inv, t);
    let t = tape.scale(t, -0.5);
    let ln_s = tape.ln(noise);
    let c = tape.offset(ln_s, LN_2PI);
    let c = tape.scale(c, -0.5);
    tape.add_row(t, c)
}

/// Objective nodes on a tape.
pub(crate) struct TapeObjective {
    pub value: Var,
    pub data_fit: Var,
    pub latent_kl: Option<Var>,
    pub layer_kl: Vec<Var>,
}

impl TapeObjective {
    pub fn estimate(&self, tape: &Tape) -> BoundEstimate {
        BoundEstimate {
            value: tape.scalar(self.value),
            data_fit: tape.scalar(self.data_fit),
            latent_kl: self.latent_kl.map_or(0.0, |v| tape.scalar(v)),
            layer_kl: self.layer_kl.iter().map(|&v| tape.scalar(v)).collect(),
        }
    }
}

/// Builds the objective for `batch`. Draws for datapoint `n`, copy `k`, layer `l`
/// come from `stream` keyed `(step, n, k, l)`.
pub(crate) fn objective_tape(
    tape: &mut Tape,
    model: &DgpModel,
    vars: &ModelVars,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    stream: &RngStream,
) -> Result<TapeObjective> {
    let batch = batch.sorted();
    let b = batch.len();
    let k = cfg.k_samples;
    let rows = b * k;
    let draws = Draws::keyed(model, &batch.indices, k, stream);
    let mode = match cfg.mode {
        Objective::Vi => SampleMode::Independent,
        Objective::Iwvi | Objective::IwaeFull => SampleMode::Correlated,
    };
    let source = LatentSource::Posterior { y: &batch.y, indices: &batch.indices };
    let fwd = forward_tape(tape, model, vars, &batch.x, k, &draws, mode.groups(b, k), source)?;
    let final_vars = vars.final_gp();
    let (mean, var) = match cfg.mode {
        Objective::Vi | Objective::Iwvi => gp_layer::marginal_tape(tape, final_vars, fwd.final_input)?,
        Objective::IwaeFull => {
            let eps = tape.leaf(draws.layers.last().expect("non-empty model").clone());
            let f = gp_layer::sample_tape(tape, final_vars, fwd.final_input, &fwd.groups, eps)?;
            let zero = tape.leaf(DMatrix::zeros(rows, 1));
            (f, zero)
        }
    };
    let y_rows = DMatrix::from_fn(rows, 1, |r, _| batch.y[r / k]);
    let y_leaf = tape.leaf(y_rows);
    let loglik = expected_loglik_tape(tape, y_leaf, mean, var, vars.noise);
    let scale = cfg.scale(b);

    let (per_point, latent_kl) = match cfg.mode {
        Objective::Vi => (loglik, fwd.latent_kl),
        Objective::Iwvi | Objective::IwaeFull => {
            let logw = match fwd.log_ratio {
                Some(lr) => tape.add(loglik, lr),
                None => loglik,
            };
            let lme = tape.group_log_mean_exp(logw, Arc::new(Groups::uniform(b, k)));
            (lme, None)
        }
    };
    let data_sum = tape.sum(per_point);
    let data_fit = tape.scale(data_sum, scale);
    let latent_kl = latent_kl.map(|kl| {
        let s = tape.sum(kl);
        tape.scale(s, scale)
    });
    let mut layer_kl = Vec::new();
    for lv in &vars.layers {
        if let LayerVars::Gp(g) = lv {
            layer_kl.push(if g.switched_off { tape.leaf(DMatrix::zeros(1, 1)) } else { gp_layer::kl_tape(tape, g)? });
        }
    }
    let mut value = data_fit;
    if let Some(kl) = latent_kl {
        value = tape.sub(value, kl);
    }
    for &kl in &layer_kl {
        value = tape.sub(value, kl);
    }
    Ok(TapeObjective { value, data_fit, latent_kl, layer_kl })
}

/// Any of the three objectives, chosen by `cfg.mode`.
pub fn evaluate_bound(model: &DgpModel, batch: &Batch, cfg: &ObjectiveConfig, stream: &RngStream) -> Result<BoundEstimate> {
    let mut tape = Tape::new();
    let vars = ModelVars::leaves(&mut tape, model, false);
    let obj = objective_tape(&mut tape, model, &vars, batch, cfg, stream)?;
    Ok(obj.estimate(&tape))
}

fn require(cfg: &ObjectiveConfig, mode: Objective) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Config(format!("objective configured as {}, evaluated as {mode}", cfg.mode)));
    }
    Ok(())
}

pub fn vi_elbo(model: &DgpModel, batch: &Batch, cfg: &ObjectiveConfig, stream: &RngStream) -> Result<BoundEstimate> {
    require(cfg, Objective::Vi)?;
    evaluate_bound(model, batch, cfg, stream)
}

pub fn iwvi_bound(model: &DgpModel, batch: &Batch, cfg: &ObjectiveConfig, stream: &RngStream) -> Result<BoundEstimate> {
    require(cfg, Objective::Iwvi)?;
    evaluate_bound(model, batch, cfg, stream)
}

pub fn iwae_full_bound(model: &DgpModel, batch: &Batch, cfg: &ObjectiveConfig, stream: &RngStream) -> Result<BoundEstimate> {
    require(cfg, Objective::IwaeFull)?;
    evaluate_bound(model, batch, cfg, stream)
}
