//! Layer-spec strings, model construction and end-to-end propagation.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_layer::{self, CovVars, GaussianVariationalU, GpLayer, GpVars, InducingSet};
use crate::kernels::{KernelParams, LinearMean, OutputProjection};
use crate::lv_layer::{self, encoder_tape, EncoderVars, LvLayer, LvPosterior};
use crate::numerics::{draw_standard_normal, RngStream};
use crate::tape::{Groups, Tape, Var};

pub const DEFAULT_INNER_WIDTH: usize = 5;
pub const DEFAULT_LATENT_DIM: usize = 1;
pub const DEFAULT_NUM_INDUCING: usize = 128;
pub const DEFAULT_LIKELIHOOD_VARIANCE: f64 = 0.01;
/// Initial square-root scale of `q(u)` for inner layers.
pub const INNER_Q_SCALE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Lv { latent_dim: usize },
    /// `width` latent GPs for an inner layer; the last GP layer always has one output.
    Gp { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub likelihood_variance: f64,
}

/// Parses hyphen-separated `LV` / `GP` tokens, e.g. `"LV-GP-GP"`.
pub fn parse_spec(text: &str) -> Result<ModelSpec> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::EmptySpec);
    }
    let mut layers = Vec::new();
    for (position, token) in text.split('-').enumerate() {
        layers.push(match token.trim() {
            "LV" => LayerSpec::Lv { latent_dim: DEFAULT_LATENT_DIM },
            "GP" => LayerSpec::Gp { width: DEFAULT_INNER_WIDTH },
            other => return Err(Error::Parse { token: other.to_string(), position }),
        });
    }
    if !matches!(layers.last(), Some(LayerSpec::Gp { .. })) {
        return Err(Error::NoFinalGp);
    }
    Ok(ModelSpec { layers, likelihood_variance: DEFAULT_LIKELIHOOD_VARIANCE })
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<&str> = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Lv { .. } => "LV",
                LayerSpec::Gp { .. } => "GP",
            })
            .collect();
        f.write_str(&tokens.join("-"))
    }
}

impl std::str::FromStr for ModelSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_spec(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LvMode {
    PerPoint,
    Amortized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub num_inducing: usize,
    pub lv_mode: LvMode,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { num_inducing: DEFAULT_NUM_INDUCING, lv_mode: LvMode::PerPoint, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Lv(LvLayer),
    Gp(GpLayer),
}

impl Layer {
    /// Number of standard-normal draws this layer consumes per row.
    pub fn draw_width(&self) -> usize {
        match self {
            Layer::Lv(l) => l.latent_dim,
            Layer::Gp(g) => g.num_latent(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpModel {
    pub spec: ModelSpec,
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub likelihood_variance: f64,
}

impl DgpModel {
    pub fn new(spec: ModelSpec, input_dim: usize, layers: Vec<Layer>, likelihood_variance: f64) -> Result<Self> {
        let model = DgpModel { spec, input_dim, layers, likelihood_variance };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::EmptySpec);
        }
        if self.layers.len() != self.spec.layers.len() {
            return Err(Error::DimensionMismatch("layer count differs from specification".into()));
        }
        if !(self.likelihood_variance > 0.0) {
            return Err(Error::NonPositiveNoise(self.likelihood_variance));
        }
        let mut dim = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Lv(l) => dim += l.latent_dim,
                Layer::Gp(g) => {
                    g.validate()?;
                    if g.input_dim() != dim {
                        return Err(Error::DimensionMismatch(format!(
                            "layer {i} expects {} inputs, receives {dim}",
                            g.input_dim()
                        )));
                    }
                    dim = g.output_dim();
                }
            }
        }
        match self.layers.last() {
            Some(Layer::Gp(_)) if dim == 1 => Ok(()),
            _ => Err(Error::NoFinalGp),
        }
    }

    /// Initializes every layer from the training data.
    ///
    /// Data are pushed through the mean functions to initialize the next layer:
    /// with `w = 0` for the principal directions, with `w ~ N(0, 1)` for the inducing inputs.
    pub fn init(spec: &ModelSpec, x: &DMatrix<f64>, y: &DVector<f64>, cfg: &InitConfig) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::EmptySpec);
        }
        if x.nrows() != y.len() || x.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!("{} input rows, {} targets", x.nrows(), y.len())));
        }
        if cfg.num_inducing == 0 {
            return Err(Error::Config("at least one inducing point is required".into()));
        }
        let n = x.nrows();
        let root = RngStream::new(cfg.seed);
        let mut h_pca = x.clone();
        let mut h_z = x.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let last = spec.layers.len() - 1;
        for (l, ls) in spec.layers.iter().enumerate() {
            let stream = root.with_key(0, 0, 0, l as u32);
            match *ls {
                LayerSpec::Lv { latent_dim } => {
                    let layer = match cfg.lv_mode {
                        LvMode::PerPoint => LvLayer::per_point(latent_dim, n, &stream)?,
                        LvMode::Amortized => LvLayer::amortized(latent_dim, x.ncols() + 1, &stream)?,
                    };
                    let pad = DMatrix::from_vec(n, latent_dim, draw_standard_normal(&stream.with_key(0, 1, 0, l as u32), n * latent_dim));
                    h_pca = hcat(&h_pca, &DMatrix::zeros(n, latent_dim));
                    h_z = hcat(&h_z, &pad);
                    layers.push(Layer::Lv(layer));
                }
                LayerSpec::Gp { width } => {
                    let d_in = h_pca.ncols();
                    let (mean, e, q_scale) = if l == last {
                        (final_mean(&h_pca, y), 1, 1.0)
                    } else {
                        (inner_mean(&h_pca, width), width, INNER_Q_SCALE)
                    };
                    let z = if n > cfg.num_inducing {
                        kmeans(&h_z, cfg.num_inducing, &stream.with_key(0, 2, 0, l as u32))
                    } else {
                        h_z.clone()
                    };
                    let z = unique_rows(&z);
                    let m = z.nrows();
                    let layer = GpLayer::new(
                        KernelParams::default_for_dim(d_in),
                        InducingSet::new(z)?,
                        GaussianVariationalU::isotropic(m, e, q_scale),
                        mean,
                        OutputProjection::identity(e),
                    )?;
                    h_pca = crate::kernels::mean_eval(&layer.mean, &h_pca)?;
                    h_z = crate::kernels::mean_eval(&layer.mean, &h_z)?;
                    layers.push(Layer::Gp(layer));
                }
            }
        }
        let mut model_spec = spec.clone();
        if let Some(LayerSpec::Gp { width }) = model_spec.layers.last_mut() {
            *width = 1;
        }
        DgpModel::new(model_spec, x.ncols(), layers, spec.likelihood_variance)
    }

    pub fn final_layer(&self) -> &GpLayer {
        match self.layers.last() {
            Some(Layer::Gp(g)) => g,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn final_layer_mut(&mut self) -> &mut GpLayer {
        match self.layers.last_mut() {
            Some(Layer::Gp(g)) => g,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn has_latent_variables(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Lv(_)))
    }

    /// Every GP layer's `q(u)` set to its prior.
    pub fn set_q_to_prior(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if let Layer::Gp(g) = layer {
                g.set_q_to_prior()?;
            }
        }
        Ok(())
    }
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Principal directions of the rows of `h`, by decreasing variance, as columns.
/// Each direction's largest-magnitude entry is positive.
pub fn principal_directions(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows() as f64;
    let mean = h.row_mean();
    let mut centered = h.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.tr_mul(&centered) / n.max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let d = h.ncols();
    let mut dirs = DMatrix::zeros(d, d);
    for (c, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        dirs.set_column(c, &v);
    }
    dirs
}

/// Identity when the width is preserved, top principal directions when it shrinks,
/// zero-padded identity when it grows.
fn inner_mean(h: &DMatrix<f64>, width: usize) -> LinearMean {
    let d_in = h.ncols();
    let weight = if d_in == width {
        DMatrix::identity(width, width)
    } else if d_in > width {
        principal_directions(h).columns(0, width).transpose()
    } else {
        DMatrix::identity(width, d_in)
    };
    LinearMean { weight, bias: DVector::zeros(width) }
}

/// First principal direction, oriented to correlate positively with the targets.
fn final_mean(h: &DMatrix<f64>, y: &DVector<f64>) -> LinearMean {
    let dir = principal_directions(h).column(0).into_owned();
    let proj = h * &dir;
    let (pm, ym) = (proj.mean(), y.mean());
    let cov: f64 = proj.iter().zip(y.iter()).map(|(p, t)| (p - pm) * (t - ym)).sum();
    let sign = if cov < 0.0 { -1.0 } else { 1.0 };
    LinearMean { weight: DMatrix::from_row_slice(1, dir.len(), (dir * sign).as_slice()), bias: DVector::zeros(1) }
}

fn unique_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut keep: Vec<usize> = Vec::with_capacity(z.nrows());
    for i in 0..z.nrows() {
        if keep.iter().all(|&j| (z.row(i) - z.row(j)).norm() > 1e-10) {
            keep.push(i);
        }
    }
    z.select_rows(&keep)
}

/// Lloyd's algorithm from a k-means++ start. Returns `k` centers as rows.
pub fn kmeans(x: &DMatrix<f64>, k: usize, stream: &RngStream) -> DMatrix<f64> {
    const ITERATIONS: usize = 50;
    let n = x.nrows();
    let mut rng = stream.rng();
    let sq = |i: usize, c: &DMatrix<f64>, j: usize| (x.row(i) - c.row(j)).norm_squared();
    let mut centers = DMatrix::zeros(k, x.ncols());
    centers.set_row(0, &x.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq(i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &x.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq(i, &centers, c));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..ITERATIONS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .map(|c| (c, sq(i, &centers, c)))
                .min_by(|p, q| p.1.total_cmp(&q.1))
                .map(|p| p.0)
                .unwrap_or(0);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += x.row(i);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.set_row(c, &(sums.row(c) / counts[c] as f64));
            }
        }
    }
    centers
}

/// Standard-normal draws for every layer, rows ordered datapoint-major (`row = b·K + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    /// One rows × draw-width matrix per layer.
    pub layers: Vec<DMatrix<f64>>,
}

impl Draws {
    /// Draws for layer `l`, datapoint `n`, copy `k` come from the stream keyed `(step, n, k, l)`.
    pub fn keyed(model: &DgpModel, indices: &[usize], k: usize, stream: &RngStream) -> Self {
        let step = stream.key.step;
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let w = layer.draw_width();
                let mut m = DMatrix::zeros(indices.len() * k, w);
                for (b, &n) in indices.iter().enumerate() {
                    for j in 0..k {
                        let v = draw_standard_normal(&stream.with_key(step, n as u64, j as u32, l as u32), w);
                        for (c, x) in v.into_iter().enumerate() {
                            m[(b * k + j, c)] = x;
                        }
                    }
                }
                m
            })
            .collect();
        Draws { layers }
    }

    pub fn zeros(model: &DgpModel, rows: usize) -> Self {
        Draws { layers: model.layers.iter().map(|l| DMatrix::zeros(rows, l.draw_width())).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Each row sampled from its own marginal.
    Independent,
    /// The K copies of a datapoint share one function draw per layer.
    Correlated,
}

impl SampleMode {
    pub(crate) fn groups(self, datapoints: usize, k: usize) -> Arc<Groups> {
        Arc::new(match self {
            SampleMode::Independent => Groups::singletons(datapoints * k),
            SampleMode::Correlated => Groups::uniform(datapoints, k),
        })
    }
}

/// Where latent covariates come from.
#[derive(Debug, Clone, Copy)]
pub enum LatentSource<'a> {
    /// `q(w_n)`; `y` and global `indices` identify the datapoints.
    Posterior { y: &'a DVector<f64>, indices: &'a [usize] },
    Prior,
}

/// A model's parameters as tape leaves.
#[derive(Debug, Clone)]
pub(crate) enum LvVars {
    PerPoint { a: Var, b: Var },
    Amortized(EncoderVars),
}

#[derive(Debug, Clone)]
pub(crate) enum LayerVars {
    Lv(LvVars),
    Gp(GpVars),
}

#[derive(Debug, Clone)]
pub(crate) struct ModelVars {
    pub layers: Vec<LayerVars>,
    pub noise: Var,
}

impl ModelVars {
    /// `final_full_cov` puts the final layer's `S` on the tape instead of its square root.
    pub fn leaves(tape: &mut Tape, model: &DgpModel, final_full_cov: bool) -> Self {
        let last = model.layers.len() - 1;
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| match layer {
                Layer::Lv(lv) => LayerVars::Lv(match &lv.posterior {
                    LvPosterior::PerPoint { a, b } => LvVars::PerPoint { a: tape.leaf(a.clone()), b: tape.leaf(b.clone()) },
                    LvPosterior::Amortized { encoder } => LvVars::Amortized(EncoderVars::leaves(tape, encoder)),
                }),
                Layer::Gp(g) => {
                    let cov = if l == last && final_full_cov {
                        CovVars::Full((0..g.num_latent()).map(|e| tape.leaf(g.qu.cov(e))).collect())
                    } else {
                        CovVars::Sqrt(g.qu.cov_sqrt.iter().map(|s| tape.leaf(s.clone())).collect())
                    };
                    let variance = tape.constant_scalar(g.kernel.variance);
                    let ls = &g.kernel.lengthscales;
                    let lengthscales = tape.leaf(DMatrix::from_row_slice(1, ls.len(), ls.as_slice()));
                    let z = tape.leaf(g.inducing.z().clone());
                    let q_mean = tape.leaf(g.qu.mean.clone());
                    LayerVars::Gp(GpVars::assemble(tape, g, variance, lengthscales, z, q_mean, cov))
                }
            })
            .collect();
        let noise = tape.constant_scalar(model.likelihood_variance);
        ModelVars { layers, noise }
    }

    pub fn final_gp(&self) -> &GpVars {
        match self.layers.last() {
            Some(LayerVars::Gp(g)) => g,
            _ => unreachable!("final layer is a GP"),
        }
    }
}

/// Everything before the final layer, on the tape.
pub(crate) struct Forward {
    /// rows × final input dim
    pub final_input: Var,
    /// `Σ_layers log p(w) − log q(w)` per row, when latent layers exist
    pub log_ratio: Option<Var>,
    /// `Σ_layers KL(q(w_n) ‖ p(w_n))` per datapoint, when latent layers exist and the source is the posterior
    pub latent_kl: Option<Var>,
    pub groups: Arc<Groups>,
}

pub(crate) fn forward_tape(
    tape: &mut Tape,
    model: &DgpModel,
    vars: &ModelVars,
    x: &DMatrix<f64>,
    k: usize,
    draws: &Draws,
    groups: Arc<Groups>,
    source: LatentSource<'_>,
) -> Result<Forward> {
    let b = x.nrows();
    let rows = b * k;
    if x.ncols() != model.input_dim {
        return Err(Error::DimensionMismatch(format!("model expects {} inputs, got {}", model.input_dim, x.ncols())));
    }
    if draws.layers.len() != model.layers.len() {
        return Err(Error::DimensionMismatch("one draw matrix per layer is required".into()));
    }
    for (d, layer) in draws.layers.iter().zip(&model.layers) {
        if d.shape() != (rows, layer.draw_width()) {
            return Err(Error::DimensionMismatch(format!(
                "draws must be {rows}x{}, got {}x{}",
                layer.draw_width(),
                d.nrows(),
                d.ncols()
            )));
        }
    }
    if let LatentSource::Posterior { y, indices } = source {
        if y.len() != b || indices.len() != b {
            return Err(Error::DimensionMismatch("targets and indices must match the batch".into()));
        }
    }
    if groups.total() != rows {
        return Err(Error::DimensionMismatch("sample groups do not cover the rows".into()));
    }
    let repeat: Arc<[usize]> = (0..rows).map(|r| r / k).collect();
    let x_leaf = tape.leaf(x.clone());
    let mut h = if k == 1 { x_leaf } else { tape.gather_rows(x_leaf, repeat.clone()) };
    let mut log_ratio: Option<Var> = None;
    let mut latent_kl: Option<Var> = None;
    let last = model.layers.len() - 1;
    let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v),
            None => v,
        });
    };
    for (l, (layer, lvars)) in model.layers.iter().zip(&vars.layers).enumerate().take(last) {
        let eps = &draws.layers[l];
        match (layer, lvars) {
            (Layer::Lv(_), LayerVars::Lv(lv)) => {
                let w = match source {
                    LatentSource::Prior => {
                        let w = tape.leaf(eps.clone());
                        let zero = tape.leaf(DMatrix::zeros(rows, 1));
                        accumulate(tape, &mut log_ratio, zero);
                        w
                    }
                    LatentSource::Posterior { y, indices } => {
                        let (a_b, b_b) = match lv {
                            LvVars::PerPoint { a, b: bv } => {
                                let n = tape.shape(*a).0;
                                if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
                                    return Err(Error::DimensionMismatch(format!(
                                        "datapoint {bad} outside the {n}-row latent table"
                                    )));
                                }
                                let idx: Arc<[usize]> = Arc::from(indices);
                                (tape.gather_rows(*a, idx.clone()), tape.gather_rows(*bv, idx))
                            }
                            LvVars::Amortized(enc) => {
                                let mut u = DMatrix::zeros(b, x.ncols() + 1);
                                u.columns_mut(0, x.ncols()).copy_from(x);
                                u.set_column(x.ncols(), y);
                                let u = tape.leaf(u);
                                encoder_tape(tape, enc, u)
                            }
                        };
                        let kl = lv_layer::kl_tape(tape, a_b, b_b);
                        accumulate(tape, &mut latent_kl, kl);
                        let (a_r, b_r) = if k == 1 {
                            (a_b, b_b)
                        } else {
                            (tape.gather_rows(a_b, repeat.clone()), tape.gather_rows(b_b, repeat.clone()))
                        };
                        let e = tape.leaf(eps.clone());
                        let w = lv_layer::sample_q_tape(tape, a_r, b_r, e);
                        let lr = lv_layer::log_ratio_tape(tape, w, b_r, eps);
                        accumulate(tape, &mut log_ratio, lr);
                        w
                    }
                };
                h = tape.concat_cols(&[h, w]);
            }
            (Layer::Gp(_), LayerVars::Gp(g)) => {
                let e = tape.leaf(eps.clone());
                h = gp_layer::sample_tape(tape, g, h, &groups, e)?;
            }
            _ => unreachable!("variables mirror the model"),
        }
    }
    Ok(Forward { final_input: h, log_ratio, latent_kl, groups })
}

/// Final-layer inputs and the final layer's marginal there.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub final_input: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

/// Pushes `k` copies of every row of `x` through all layers but the last,
/// then returns the last layer's marginal at the resulting locations.
pub fn propagate(
    model: &DgpModel,
    x: &DMatrix<f64>,
    k: usize,
    draws: &Draws,
    mode: SampleMode,
    source: LatentSource<'_>,
) -> Result<Propagation> {
    if k == 0 {
        return Err(Error::Config("at least one copy per datapoint is required".into()));
    }
    let mut tape = Tape::new();
    let vars = ModelVars::leaves(&mut tape, model, false);
    let fwd = forward_tape(&mut tape, model, &vars, x, k, draws, mode.groups(x.nrows(), k), source)?;
    let (m, v) = gp_layer::marginal_tape(&mut tape, vars.final_gp(), fwd.final_input)?;
    Ok(Propagation {
        final_input: tape.value(fwd.final_input).clone(),
        mean: tape.value(m).column(0).into_owned(),
        variance: tape.value(v).column(0).map(|s| s.max(0.0)),
    })
}

/// One joint draw from the prior over the whole grid: `w ~ N(0, I)` per grid point and
/// each GP layer sampled with `q(u)` set to its prior.
pub fn prior_sample_path(model: &DgpModel, x: &DMatrix<f64>, stream: &RngStream) -> Result<DVector<f64>> {
    let mut prior = model.clone();
    prior.set_q_to_prior()?;
    let g = x.nrows();
    let step = stream.key.step;
    let draws = Draws {
        layers: prior
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let w = layer.draw_width();
                DMatrix::from_vec(g, w, draw_standard_normal(&stream.with_key(step, 0, 0, l as u32), g * w))
            })
            .collect(),
    };
    let mut tape = Tape::new();
    let vars = ModelVars::leaves(&mut tape, &prior, false);
    let one_group = Arc::new(Groups::uniform(1, g));
    let fwd = forward_tape(&mut tape, &prior, &vars, x, 1, &draws, one_group, LatentSource::Prior)?;
    let e = tape.leaf(draws.layers.last().expect("non-empty").clone());
    let out = gp_layer::sample_tape(&mut tape, vars.final_gp(), fwd.final_input, &fwd.groups, e)?;
    Ok(tape.value(out).column(0).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_layer::layer_marginal;

    const SPECS: [&str; 9] = [
        "GP",
        "GP-GP",
        "GP-GP-GP",
        "LV-GP",
        "LV-GP-GP",
        "LV-GP-GP-GP",
        "GP-LV-GP",
        "GP-GP-LV-GP",
        "GP-LV-GP-GP",
    ];

    fn toy_data(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let v = draw_standard_normal(&RngStream::new(seed), 3 * n);
        let x = DMatrix::from_fn(n, 2, |i, j| v[2 * i + j]);
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + 0.1 * v[2 * n + i]);
        (x, y)
    }

    #[test]
    fn parse_cases() {
        let s = parse_spec("LV-GP-GP").unwrap();
        assert_eq!(s.layers, vec![LayerSpec::Lv { latent_dim: 1 }, LayerSpec::Gp { width: 5 }, LayerSpec::Gp { width: 5 }]);
        assert_eq!(parse_spec("GP").unwrap().layers.len(), 1);
        assert_eq!(parse_spec("GP-LV"), Err(Error::NoFinalGp));
        assert_eq!(parse_spec(""), Err(Error::EmptySpec));
        assert_eq!(parse_spec("GP-XX-GP"), Err(Error::Parse { token: "XX".into(), position: 1 }));
        assert_eq!(parse_spec("LV"), Err(Error::NoFinalGp));
        for s in SPECS {
            assert_eq!(parse_spec(s).unwrap().to_string(), s);
        }
    }

    #[test]
    fn every_listed_spec_constructs() {
        let (x, y) = toy_data(40, 1);
        for s in SPECS {
            for mode in [LvMode::PerPoint, LvMode::Amortized] {
                let cfg = InitConfig { num_inducing: 16, lv_mode: mode, seed: 3 };
                let model = DgpModel::init(&parse_spec(s).unwrap(), &x, &y, &cfg).unwrap();
                assert_eq!(model.final_layer().output_dim(), 1, "{s}");
                assert_eq!(model.final_layer().num_inducing(), 16, "{s}");
            }
        }
    }

    #[test]
    fn small_data_uses_inputs_as_inducing_points() {
        let (x, y) = toy_data(10, 2);
        let model = DgpModel::init(&parse_spec("GP").unwrap(), &x, &y, &InitConfig::default()).unwrap();
        assert_eq!(model.final_layer().inducing.z(), &x);
    }

    #[test]
    fn inner_mean_shapes() {
        let (x, _) = toy_data(30, 3);
        let up = inner_mean(&x, 5);
        assert_eq!(up.weight, DMatrix::identity(5, 2));
        let wide = hcat(&x, &DMatrix::from_fn(30, 5, |i, j| ((i * 7 + j * 3) % 11) as f64));
        let down = inner_mean(&wide, 5);
        let wwt = &down.weight * down.weight.transpose();
        assert!((wwt - DMatrix::identity(5, 5)).amax() < 1e-10);
        let (x5, _) = toy_data(30, 4);
        let x5 = hcat(&hcat(&x5, &x5), &x5.columns(0, 1).into_owned());
        assert_eq!(inner_mean(&x5, 5).weight, DMatrix::identity(5, 5));
    }

    #[test]
    fn final_mean_correlates_with_targets() {
        let (x, _) = toy_data(50, 5);
        for sign in [1.0, -1.0] {
            let y = DVector::from_fn(50, |i, _| sign * (x[(i, 0)] + x[(i, 1)]));
            let m = final_mean(&x, &y);
            let proj = &x * m.weight.transpose();
            let c: f64 = proj.column(0).iter().zip(y.iter()).map(|(p, t)| p * t).sum();
            assert!(c > 0.0);
        }
    }

    #[test]
    fn kmeans_separates_clusters() {
        let x = DMatrix::from_fn(60, 1, |i, _| if i < 30 { -5.0 + 0.01 * i as f64 } else { 5.0 + 0.01 * i as f64 });
        let c = kmeans(&x, 2, &RngStream::new(1));
        let mut v: Vec<f64> = c.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        assert!((v[0] - (-5.0 + 0.01 * 14.5)).abs() < 1e-9);
        assert!((v[1] - (5.0 + 0.01 * 44.5)).abs() < 1e-9);
    }

    #[test]
    fn single_gp_propagation_is_the_layer_marginal() {
        let (x, y) = toy_data(12, 6);
        let model = DgpModel::init(&parse_spec("GP").unwrap(), &x, &y, &InitConfig::default()).unwrap();
        let p = propagate(&model, &x, 1, &Draws::zeros(&model, 12), SampleMode::Independent, LatentSource::Prior).unwrap();
        let (m, v) = layer_marginal(model.final_layer(), &x).unwrap();
        assert_eq!(p.final_input, x);
        assert_eq!(p.mean, m.column(0).into_owned());
        assert_eq!(p.variance, v.column(0).into_owned());
    }

    #[test]
    fn zero_noise_prior_posterior_appends_zero() {
        let (x, y) = toy_data(6, 7);
        let mut model = DgpModel::init(&parse_spec("LV-GP").unwrap(), &x, &y, &InitConfig::default()).unwrap();
        if let Layer::Lv(lv) = &mut model.layers[0] {
            lv.posterior = LvPosterior::PerPoint { a: DMatrix::zeros(6, 1), b: DMatrix::from_element(6, 1, 1.0) };
        }
        let idx: Vec<usize> = (0..6).collect();
        let src = LatentSource::Posterior { y: &y, indices: &idx };
        let p = propagate(&model, &x, 1, &Draws::zeros(&model, 6), SampleMode::Independent, src).unwrap();
        assert_eq!(p.final_input, hcat(&x, &DMatrix::zeros(6, 1)));
    }

    #[test]
    fn identical_copies_stay_identical() {
        let (x, y) = toy_data(30, 8);
        let cfg = InitConfig { num_inducing: 8, lv_mode: LvMode::PerPoint, seed: 1 };
        let mut model = DgpModel::init(&parse_spec("LV-GP-GP").unwrap(), &x, &y, &cfg).unwrap();
        if let Layer::Gp(g) = &mut model.layers[1] {
            g.qu.cov_sqrt = vec![DMatrix::identity(8, 8) * 0.3; 5];
        }
        let xb = x.rows(0, 3).into_owned();
        let idx = [0usize, 1, 2];
        let mut draws = Draws::keyed(&model, &idx, 2, &RngStream::new(4));
        for r in 0..3 {
            let w = draws.layers[0][(2 * r, 0)];
            draws.layers[0][(2 * r + 1, 0)] = w;
        }
        let yb = y.rows(0, 3).into_owned();
        let src = LatentSource::Posterior { y: &yb, indices: &idx };
        let p = propagate(&model, &xb, 2, &draws, SampleMode::Correlated, src).unwrap();
        for r in 0..3 {
            assert_eq!(p.final_input.row(2 * r), p.final_input.row(2 * r + 1));
            assert_eq!(p.mean[2 * r], p.mean[2 * r + 1]);
        }
    }

    #[test]
    fn correlated_with_one_copy_equals_independent() {
        let (x, y) = toy_data(30, 9);
        let cfg = InitConfig { num_inducing: 8, lv_mode: LvMode::Amortized, seed: 2 };
        let model = DgpModel::init(&parse_spec("LV-GP-GP-GP").unwrap(), &x, &y, &cfg).unwrap();
        let idx: Vec<usize> = (0..30).collect();
        let draws = Draws::keyed(&model, &idx, 1, &RngStream::new(5).at_step(3));
        let src = LatentSource::Posterior { y: &y, indices: &idx };
        let a = propagate(&model, &x, 1, &draws, SampleMode::Independent, src).unwrap();
        let b = propagate(&model, &x, 1, &draws, SampleMode::Correlated, src).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn switched_off_layers_reduce_to_mean_functions() {
        let (x, y) = toy_data(20, 10);
        let cfg = InitConfig { num_inducing: 8, lv_mode: LvMode::PerPoint, seed: 3 };
        let mut model = DgpModel::init(&parse_spec("GP-GP").unwrap(), &x, &y, &cfg).unwrap();
        for layer in &mut model.layers {
            if let Layer::Gp(g) = layer {
                g.kernel.variance = 0.0;
            }
        }
        let out = prior_sample_path(&model, &x, &RngStream::new(6)).unwrap();
        let mut h = x.clone();
        for layer in &model.layers {
            if let Layer::Gp(g) = layer {
                h = crate::kernels::mean_eval(&g.mean, &h).unwrap();
            }
        }
        assert_eq!(out, h.column(0).into_owned());
    }

    #[test]
    fn single_point_prior_draws_have_kernel_variance() {
        let (x, y) = toy_data(5, 11);
        let mut model = DgpModel::init(&parse_spec("GP").unwrap(), &x, &y, &InitConfig::default()).unwrap();
        if let Layer::Gp(g) = &mut model.layers[0] {
            g.mean = LinearMean::zero(1, 2);
        }
        let grid = x.rows(0, 1).into_owned();
        let n = 10_000;
        let s: Vec<f64> = (0..n)
            .map(|t| prior_sample_path(&model, &grid, &RngStream::new(12).at_step(t as u64)).unwrap()[0])
            .collect();
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * (1.0 / n as f64).sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn latent_layer_spreads_prior_at_fixed_input() {
        let (x, y) = toy_data(5, 13);
        let model = DgpModel::init(&parse_spec("LV-GP").unwrap(), &x, &y, &InitConfig::default()).unwrap();
        let grid = x.rows(0, 1).into_owned();
        let s: Vec<f64> = (0..200)
            .map(|t| prior_sample_path(&model, &grid, &RngStream::new(14).at_step(t)).unwrap()[0])
            .collect();
        let mean = s.iter().sum::<f64>() / 200.0;
        assert!(s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() > 0.0);
    }

    #[test]
    fn dimension_conformance_is_checked() {
        let (x, y) = toy_data(10, 15);
        let mut model = DgpModel::init(&parse_spec("LV-GP").unwrap(), &x, &y, &InitConfig::default()).unwrap();
        model.input_dim = 3;
        assert!(model.validate().is_err());
    }
}
