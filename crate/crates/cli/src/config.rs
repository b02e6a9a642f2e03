//! Flat `key=value` run configuration.

use std::path::PathBuf;

use deepdens::bounds::Objective;
use deepdens::data::SplitSpec;
use deepdens::model::{parse_spec, LvMode};
use deepdens::training::TrainConfig;
use deepdens::{Error, Result};

/// Every recognised key, in the order written by [`RunConfig::to_text`].
pub const KEYS: [&str; 24] = [
    "model",
    "objective",
    "k",
    "data",
    "target_col",
    "data_seed",
    "split_seed",
    "split_index",
    "train_fraction",
    "steps",
    "batch",
    "lr",
    "natgrad_lr",
    "anneal",
    "anneal_every",
    "seed",
    "out",
    "num_inducing",
    "lv_mode",
    "natural_gradients",
    "optimize_inducing",
    "log_every",
    "checkpoint_every",
    "samples",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub objective: Objective,
    pub k: usize,
    /// CSV path, or `synth:bimodal[:N]` / `synth:heteroscedastic[:N]`
    pub data: String,
    pub target_col: Option<String>,
    pub data_seed: u64,
    pub split_seed: u64,
    pub split_index: u64,
    pub train_fraction: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub natgrad_lr: f64,
    pub anneal: f64,
    pub anneal_every: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub num_inducing: usize,
    pub lv_mode: LvMode,
    pub natural_gradients: bool,
    pub optimize_inducing: bool,
    pub log_every: usize,
    /// 0 writes only the final checkpoint
    pub checkpoint_every: usize,
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            model: "LV-GP".into(),
            objective: t.objective,
            k: t.k_samples,
            data: String::new(),
            target_col: None,
            data_seed: 0,
            split_seed: 0,
            split_index: 0,
            train_fraction: SplitSpec::default().train_fraction,
            steps: t.total_steps,
            batch: t.batch_size,
            lr: t.adam_lr,
            natgrad_lr: t.natgrad_lr,
            anneal: t.anneal_factor,
            anneal_every: t.anneal_every,
            seed: 0,
            out: PathBuf::from("run"),
            num_inducing: deepdens::model::DEFAULT_NUM_INDUCING,
            lv_mode: LvMode::PerPoint,
            natural_gradients: t.natural_gradients,
            optimize_inducing: t.optimize_inducing,
            log_every: 100,
            checkpoint_every: 0,
            samples: deepdens::predict::DEFAULT_PREDICT_SAMPLES,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}` (expected true or false)"))),
    }
}

pub fn lv_mode_name(m: LvMode) -> &'static str {
    match m {
        LvMode::PerPoint => "per-point",
        LvMode::Amortized => "amortized",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => {
                parse_spec(v)?;
                self.model = v.to_string();
            }
            "objective" => self.objective = v.parse()?,
            "k" => self.k = parse(key, v)?,
            "data" => self.data = v.to_string(),
            "target_col" => self.target_col = (!v.is_empty()).then(|| v.to_string()),
            "data_seed" => self.data_seed = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "split_index" => self.split_index = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "natgrad_lr" => self.natgrad_lr = parse(key, v)?,
            "anneal" => self.anneal = parse(key, v)?,
            "anneal_every" => self.anneal_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "num_inducing" => self.num_inducing = parse(key, v)?,
            "lv_mode" => {
                self.lv_mode = match v {
                    "per-point" | "per_point" => LvMode::PerPoint,
                    "amortized" => LvMode::Amortized,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `lv_mode` (expected per-point or amortized)"))),
                }
            }
            "natural_gradients" => self.natural_gradients = parse_bool(key, v)?,
            "optimize_inducing" => self.optimize_inducing = parse_bool(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)));
            };
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "model" => self.model.clone(),
            "objective" => self.objective.to_string(),
            "k" => self.k.to_string(),
            "data" => self.data.clone(),
            "target_col" => self.target_col.clone().unwrap_or_default(),
            "data_seed" => self.data_seed.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "split_index" => self.split_index.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "natgrad_lr" => self.natgrad_lr.to_string(),
            "anneal" => self.anneal.to_string(),
            "anneal_every" => self.anneal_every.to_string(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "num_inducing" => self.num_inducing.to_string(),
            "lv_mode" => lv_mode_name(self.lv_mode).to_string(),
            "natural_gradients" => self.natural_gradients.to_string(),
            "optimize_inducing" => self.optimize_inducing.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "samples" => self.samples.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Resolved configuration as a `key=value` file that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k))).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.steps,
            batch_size: self.batch,
            adam_lr: self.lr,
            natgrad_lr: self.natgrad_lr,
            anneal_factor: self.anneal,
            anneal_every: self.anneal_every,
            seed: self.seed,
            objective: self.objective,
            k_samples: if self.objective == Objective::Vi { 1 } else { self.k },
            natural_gradients: self.natural_gradients,
            optimize_inducing: self.optimize_inducing,
            log_every: self.log_every,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { train_fraction: self.train_fraction, seed: self.split_seed, index: self.split_index }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("model = LV-GP-GP\nobjective=iwae # comment\n\nk=7\nlv_mode=amortized\ntarget_col=price\n").unwrap();
        assert_eq!(c.model, "LV-GP-GP");
        assert_eq!(c.objective, Objective::IwaeFull);
        assert_eq!(c.k, 7);
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("k=5\nlearning_rate=0.1\n").unwrap_err();
        assert_eq!(err, Error::Config("line 2: unknown key `learning_rate`".into()));
        assert!(matches!(c.apply_text("steps=many"), Err(Error::Config(m)) if m.contains("line 1") && m.contains("steps")));
        assert!(matches!(c.apply_text("model=GP-XX"), Err(Error::Parse { .. })));
        assert!(c.apply_text("just words").is_err());
    }

    #[test]
    fn vi_forces_one_sample() {
        let mut c = RunConfig::default();
        c.set("objective", "vi").unwrap();
        assert_eq!(c.train_config().k_samples, 1);
    }
}
