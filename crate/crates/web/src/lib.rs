//! WebAssembly front end for the static page in `www/`.
//!
//! Each export is a thin wrapper over a plain function so the logic is testable natively.

use nalgebra::{DMatrix, DVector};
use wasm_bindgen::prelude::*;

use deepdens::bounds::{evaluate_bound, Batch, Objective, ObjectiveConfig};
use deepdens::data::{synth_bimodal, Standardization};
use deepdens::gp_layer::InducingSet;
use deepdens::kernels::{KernelParams, LinearMean};
use deepdens::lv_layer::LvPosterior;
use deepdens::model::{parse_spec, prior_sample_path, DgpModel, InitConfig, Layer, LvMode};
use deepdens::numerics::RngStream;
use deepdens::predict::density_grid;
use deepdens::training::{train, TrainConfig};

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `paths` joint prior draws over `n` grid points, path-major.
pub fn prior_paths(model: &str, lo: f64, hi: f64, n: usize, paths: usize, seed: u64) -> Result<Vec<f64>, String> {
    let spec = parse_spec(model).map_err(|e| e.to_string())?;
    if n == 0 {
        return Err("the grid needs at least one point".into());
    }
    let xs = grid(lo, hi, n);
    let x = DMatrix::from_column_slice(n, 1, &xs);
    let init = InitConfig { num_inducing: 24, lv_mode: LvMode::PerPoint, seed };
    let m = DgpModel::init(&spec, &x, &DVector::zeros(n), &init).map_err(|e| e.to_string())?;
    let root = RngStream::new(seed);
    let mut out = Vec::with_capacity(n * paths);
    for p in 0..paths {
        out.extend(prior_sample_path(&m, &x, &root.at_step(p as u64)).map_err(|e| e.to_string())?.iter());
    }
    Ok(out)
}

/// Trains `spec` on a bimodal sample and returns log densities on an `nx × ny` grid
/// over the standardized square [-2, 2] × [-2.5, 2.5], row-major in x.
pub fn trained_density(spec: &str, rows: usize, steps: usize, nx: usize, ny: usize, seed: u64) -> Result<Vec<f64>, String> {
    let spec = parse_spec(spec).map_err(|e| e.to_string())?;
    let (raw, _) = synth_bimodal(rows, seed);
    let t = Standardization::fit(&raw.x, &raw.y);
    let d = t.apply(&raw);
    let init = InitConfig { num_inducing: 16, lv_mode: LvMode::Amortized, seed };
    let mut m = DgpModel::init(&spec, &d.x, &d.y, &init).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { total_steps: steps, batch_size: 128.min(rows), k_samples: 5, seed, ..TrainConfig::default() };
    train(&mut m, &d.x, &d.y, &cfg).map_err(|e| e.to_string())?;
    let xs = grid(-2.0, 2.0, nx);
    let ys = grid(-2.5, 2.5, ny);
    let g = density_grid(&m, &DMatrix::from_column_slice(nx, 1, &xs), &ys, 500, &RngStream::new(seed)).map_err(|e| e.to_string())?;
    Ok((0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).map(|(i, j)| g[(i, j)]).collect())
}

/// Two-point latent-variable model with a fixed, non-trivial posterior.
fn two_point_model() -> Result<(DgpModel, Batch), String> {
    let x = DMatrix::from_column_slice(2, 1, &[-0.4, 0.6]);
    let y = DVector::from_column_slice(&[0.3, -0.5]);
    let init = InitConfig { num_inducing: 2, lv_mode: LvMode::PerPoint, seed: 7 };
    let mut m = DgpModel::init(&parse_spec("LV-GP").map_err(|e| e.to_string())?, &x, &y, &init).map_err(|e| e.to_string())?;
    m.likelihood_variance = 0.2;
    if let Layer::Lv(lv) = &mut m.layers[0] {
        lv.posterior = LvPosterior::PerPoint { a: DMatrix::from_column_slice(2, 1, &[0.5, -0.3]), b: DMatrix::from_column_slice(2, 1, &[0.6, 0.4]) };
    }
    if let Layer::Gp(g) = &mut m.layers[1] {
        g.kernel = KernelParams::new(0.8, DVector::from_column_slice(&[1.0, 0.9]));
        g.mean = LinearMean { weight: DMatrix::from_row_slice(1, 2, &[0.3, 0.2]), bias: DVector::zeros(1) };
        g.inducing = InducingSet::new(DMatrix::from_row_slice(2, 2, &[-0.5, 0.4, 0.7, -0.6])).map_err(|e| e.to_string())?;
        g.qu.mean = DMatrix::from_column_slice(2, 1, &[0.2, -0.3]);
        g.qu.cov_sqrt = vec![DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.4])];
    }
    Ok((m, Batch::select(&x, &y, &[0, 1])))
}

/// Mean over `streams` draws of the `objective` bound for K = 1..=max_k.
pub fn bound_curve(objective: &str, max_k: usize, streams: usize, seed: u64) -> Result<Vec<f64>, String> {
    let mode: Objective = objective.parse().map_err(|e: deepdens::Error| e.to_string())?;
    let (m, batch) = two_point_model()?;
    let root = RngStream::new(seed);
    (1..=max_k)
        .map(|k| {
            let cfg = ObjectiveConfig::new(mode, k, 2).map_err(|e| e.to_string())?;
            let mut total = 0.0;
            for s in 0..streams {
                total += evaluate_bound(&m, &batch, &cfg, &root.at_step(s as u64)).map_err(|e| e.to_string())?.value;
            }
            Ok(total / streams as f64)
        })
        .collect()
}

#[wasm_bindgen(js_name = priorPaths)]
pub fn prior_paths_js(model: &str, lo: f64, hi: f64, n: usize, paths: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    prior_paths(model, lo, hi, n, paths, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = trainedDensity)]
pub fn trained_density_js(spec: &str, rows: usize, steps: usize, nx: usize, ny: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    trained_density(spec, rows, steps, nx, ny, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = boundCurve)]
pub fn bound_curve_js(objective: &str, max_k: usize, streams: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    bound_curve(objective, max_k, streams, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}
