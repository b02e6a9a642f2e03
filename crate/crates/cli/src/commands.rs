//! Subcommand implementations. Each returns an error that [`exit_code`] maps to the process status.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use deepdens::checkpoint::Checkpoint;
use deepdens::data::{load_csv, standardize_split, Dataset, GroundTruth, Split, SplitSpec};
use deepdens::model::{parse_spec, prior_sample_path, DgpModel, InitConfig, LvMode};
use deepdens::numerics::RngStream;
use deepdens::predict::{density_grid, evaluate, summarize_splits, SplitSummary};
use deepdens::training::{train_with, MetricRecord, TrainObserver};
use deepdens::{Error, Result};

use crate::config::{lv_mode_name, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::EmptySpec | Error::NoFinalGp => EXIT_CONFIG,
        Error::FileNotFound(_)
        | Error::MalformedRow { .. }
        | Error::MissingTarget(_)
        | Error::VersionMismatch { .. }
        | Error::DimensionMismatch(_)
        | Error::Io(_) => EXIT_DATA,
        _ => EXIT_NUMERICAL,
    }
}

/// Synthetic sets default to this many rows.
pub const DEFAULT_SYNTH_ROWS: usize = 2000;

/// Reads a CSV path or generates `synth:<name>[:rows]`.
pub fn load_source(source: &str, target: Option<&str>, data_seed: u64) -> Result<Dataset> {
    if source.is_empty() {
        return Err(Error::Config("no data source given (`data`)".into()));
    }
    let Some(rest) = source.strip_prefix("synth:") else {
        return load_csv(source, target);
    };
    let (name, rows) = match rest.split_once(':') {
        Some((n, r)) => (n, r.parse().map_err(|_| Error::Config(format!("invalid row count in `{source}`")))?),
        None => (rest, DEFAULT_SYNTH_ROWS),
    };
    let truth = match name {
        "bimodal" => GroundTruth::Bimodal,
        "heteroscedastic" => GroundTruth::Heteroscedastic,
        _ => return Err(Error::Config(format!("unknown synthetic generator `{name}`"))),
    };
    Ok(truth.generate(rows, data_seed))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn metrics_line(r: &MetricRecord) -> String {
    serde_json::to_string(r).expect("metric records serialize")
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_record: Option<MetricRecord>,
}

fn checkpoint_for(cfg: &RunConfig, model: &DgpModel, split: &Split, step: usize) -> Checkpoint {
    let mut ck = Checkpoint::new(model.clone(), split.transform.clone(), cfg.seed, step);
    for key in ["data", "target_col", "data_seed", "split_seed", "split_index", "train_fraction", "objective", "k", "lv_mode", "num_inducing"] {
        ck.settings.insert(key.to_string(), cfg.get(key));
    }
    ck
}

/// Trains on the training part of the configured split.
///
/// Writes `config.txt`, `metrics.jsonl` and `model.json` to the output directory.
/// On a numerical failure the last finite model is still written before the error is returned.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let spec = parse_spec(&cfg.model)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let data = load_source(&cfg.data, cfg.target_col.as_deref(), cfg.data_seed)?;
    let split = standardize_split(&data, &cfg.split_spec())?;
    create_dir(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    let init = InitConfig { num_inducing: cfg.num_inducing, lv_mode: cfg.lv_mode, seed: cfg.seed };
    let mut model = DgpModel::init(&spec, &split.train.x, &split.train.y, &init)?;

    let metrics_path = cfg.out.join("metrics.jsonl");
    let mut obs = RunObserver { cfg, split: &split, metrics: BufWriter::new(File::create(&metrics_path)?), io_error: None, last: None, steps_done: 0 };
    let result = train_with(&mut model, &split.train.x, &split.train.y, &tc, &mut obs);
    obs.metrics.flush()?;
    if let Some(e) = obs.io_error.take() {
        return Err(e.into());
    }
    let last = obs.last.take();
    let ck_path = cfg.out.join("model.json");
    checkpoint_for(cfg, &model, &split, obs.steps_done).save(&ck_path)?;
    result?;
    Ok(TrainOutput { checkpoint: ck_path, metrics: metrics_path, final_record: last })
}

struct RunObserver<'a> {
    cfg: &'a RunConfig,
    split: &'a Split,
    metrics: BufWriter<File>,
    io_error: Option<std::io::Error>,
    last: Option<MetricRecord>,
    steps_done: usize,
}

impl TrainObserver for RunObserver<'_> {
    fn record(&mut self, r: &MetricRecord) {
        if let Err(e) = writeln!(self.metrics, "{}", metrics_line(r)) {
            self.io_error.get_or_insert(e);
        }
        self.last = Some(r.clone());
    }

    fn step_done(&mut self, steps_done: usize, model: &DgpModel) -> Result<()> {
        self.steps_done = steps_done;
        let every = self.cfg.checkpoint_every;
        if every > 0 && steps_done % every == 0 && steps_done < self.cfg.steps {
            checkpoint_for(self.cfg, model, self.split, steps_done).save(self.cfg.out.join(format!("model_step{steps_done}.json")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub mean_loglik: f64,
    /// standard error of the mean over test points
    pub std_err: f64,
    pub median_shapiro_wilk: f64,
    pub num_points: usize,
    pub split_seed: u64,
    pub split_index: u64,
    pub per_point_loglik: Vec<f64>,
    pub shapiro_wilk: Vec<f64>,
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a str>,
    pub split_seed: Option<u64>,
    pub split_index: Option<u64>,
    pub samples: usize,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

fn setting<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<Option<T>> {
    match ck.settings.get(key) {
        None => Ok(None),
        Some(v) if v.is_empty() => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("checkpoint setting `{key}` is invalid: `{v}`"))),
    }
}

/// Test-split log-likelihood and Shapiro–Wilk statistics for a checkpoint.
pub fn cmd_eval(args: &EvalArgs<'_>) -> Result<(EvalFile, PathBuf)> {
    let ck = Checkpoint::load(args.checkpoint)?;
    let source: String = match args.data {
        Some(d) => d.to_string(),
        None => setting(&ck, "data")?.ok_or_else(|| Error::Config("no data source given and none recorded in the checkpoint".into()))?,
    };
    let target: Option<String> = setting(&ck, "target_col")?;
    let data = load_source(&source, target.as_deref(), setting(&ck, "data_seed")?.unwrap_or(0))?;
    if data.dim() != ck.model.input_dim {
        return Err(Error::DimensionMismatch(format!("checkpoint expects D = {} inputs, data has {}", ck.model.input_dim, data.dim())));
    }
    let split_spec = SplitSpec {
        train_fraction: setting(&ck, "train_fraction")?.unwrap_or(SplitSpec::default().train_fraction),
        seed: args.split_seed.or(setting(&ck, "split_seed")?).unwrap_or(0),
        index: args.split_index.or(setting(&ck, "split_index")?).unwrap_or(0),
    };
    let split = standardize_split(&data, &split_spec)?;
    if split.test.is_empty() {
        return Err(Error::Config("the split leaves no test rows".into()));
    }
    // the test rows are standardized with the training statistics stored in the checkpoint
    let test = ck.standardization.apply(&data.select(&split.test_idx));
    let report = evaluate(&ck.model, &test.x, &test.y, args.samples, &RngStream::new(args.seed))?;
    let n = report.per_point_loglik.len();
    let summary = summarize_splits(&report.per_point_loglik);
    let file = EvalFile {
        mean_loglik: report.mean_loglik,
        std_err: if n > 1 { summary.std_err } else { 0.0 },
        median_shapiro_wilk: report.median_shapiro_wilk,
        num_points: n,
        split_seed: split_spec.seed,
        split_index: split_spec.index,
        per_point_loglik: report.per_point_loglik,
        shapiro_wilk: report.shapiro_wilk,
    };
    let out = args.out.map(Path::to_path_buf).unwrap_or_else(|| args.checkpoint.with_file_name("eval.json"));
    write_json(&out, &file)?;
    Ok((file, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_loglik: SplitSummary,
    pub median_shapiro_wilk: SplitSummary,
    pub per_split_loglik: Vec<f64>,
}

/// Mean and standard error across per-split evaluation files.
pub fn cmd_aggregate(reports: &[PathBuf]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Config("no evaluation reports given".into()));
    }
    let mut ll = Vec::new();
    let mut sw = Vec::new();
    for p in reports {
        if !p.exists() {
            return Err(Error::FileNotFound(p.display().to_string()));
        }
        let text = std::fs::read_to_string(p)?;
        let f: EvalFile = serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        ll.push(f.mean_loglik);
        sw.push(f.median_shapiro_wilk);
    }
    Ok(Aggregate { mean_loglik: summarize_splits(&ll), median_shapiro_wilk: summarize_splits(&sw), per_split_loglik: ll })
}

/// `lo:hi:n`, `n ≥ 1` evenly spaced points (just `lo` when `n = 1`).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("grid `{text}` is not lo:hi:n"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

pub struct PriorArgs<'a> {
    pub model: &'a str,
    pub grid: &'a str,
    pub paths: usize,
    pub num_inducing: usize,
    pub seed: u64,
    pub out: &'a Path,
}

/// Joint prior draws over a 1D grid, written as `path,x,sample` rows.
pub fn cmd_sample_prior(args: &PriorArgs<'_>) -> Result<usize> {
    let spec = parse_spec(args.model)?;
    let xs = parse_grid(args.grid)?;
    if args.paths == 0 {
        return Err(Error::Config("at least one path is required".into()));
    }
    let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
    let y = DVector::zeros(xs.len());
    let init = InitConfig { num_inducing: args.num_inducing, lv_mode: LvMode::PerPoint, seed: args.seed };
    let model = DgpModel::init(&spec, &x, &y, &init)?;
    let mut w = BufWriter::new(File::create(args.out)?);
    writeln!(w, "path,x,sample")?;
    let root = RngStream::new(args.seed);
    let mut rows = 0;
    for p in 0..args.paths {
        let f = prior_sample_path(&model, &x, &root.at_step(p as u64))?;
        for (i, &xi) in xs.iter().enumerate() {
            writeln!(w, "{p},{xi:?},{:?}", f[i])?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

pub struct DensityArgs<'a> {
    pub checkpoint: &'a Path,
    pub x_grid: &'a str,
    pub y_grid: &'a str,
    pub samples: usize,
    pub seed: u64,
    pub out: &'a Path,
}

/// KDE log densities on a standardized-scale grid, written as `x,y,log_density` rows.
pub fn cmd_density(args: &DensityArgs<'_>) -> Result<usize> {
    let ck = Checkpoint::load(args.checkpoint)?;
    if ck.model.input_dim != 1 {
        return Err(Error::Config(format!("density grids need a 1D input, the model has D = {}", ck.model.input_dim)));
    }
    let xs = parse_grid(args.x_grid)?;
    let ys = parse_grid(args.y_grid)?;
    let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
    let g = density_grid(&ck.model, &x, &ys, args.samples, &RngStream::new(args.seed))?;
    let mut w = BufWriter::new(File::create(args.out)?);
    writeln!(w, "x,y,log_density")?;
    for (i, &xi) in xs.iter().enumerate() {
        for (j, &yj) in ys.iter().enumerate() {
            writeln!(w, "{xi:?},{yj:?},{:?}", g[(i, j)])?;
        }
    }
    w.flush()?;
    Ok(xs.len() * ys.len())
}

/// Human-readable one-line summary of a finished run.
pub fn describe(cfg: &RunConfig, out: &TrainOutput) -> String {
    match &out.final_record {
        Some(r) => format!(
            "trained {}{} (objective {}, K={}) for {} steps: final objective {:.4}; checkpoint {}",
            cfg.model,
            if cfg.model.contains("LV") { format!(" with {} latents", lv_mode_name(cfg.lv_mode)) } else { String::new() },
            cfg.objective,
            cfg.train_config().k_samples,
            cfg.steps,
            r.objective,
            out.checkpoint.display()
        ),
        None => format!("wrote untrained checkpoint {}", out.checkpoint.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("2:2:1").unwrap(), vec![2.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn sources() {
        assert_eq!(load_source("synth:bimodal:30", None, 1).unwrap().len(), 30);
        assert_eq!(load_source("synth:heteroscedastic", None, 1).unwrap().len(), DEFAULT_SYNTH_ROWS);
        assert!(matches!(load_source("synth:nope", None, 1), Err(Error::Config(_))));
        assert!(matches!(load_source("/no/such.csv", None, 1), Err(Error::FileNotFound(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::MissingTarget("y".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::NonFiniteGradient { group: "g".into() }), EXIT_NUMERICAL);
    }
}
