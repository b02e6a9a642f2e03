use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deepdens::{Error, Result};
use deepdens_cli::commands::{
    cmd_aggregate, cmd_density, cmd_eval, cmd_sample_prior, cmd_train, describe, exit_code, DensityArgs, EvalArgs, PriorArgs,
};
use deepdens_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "deepdens", version, about = "Deep GP conditional density estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics trace
    Train(TrainArgs),
    /// Test log-likelihood and Shapiro–Wilk statistics of a checkpoint
    Eval(EvalCmd),
    /// Mean and standard error over several evaluation reports
    Aggregate {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Joint prior draws of a freshly initialized model over a 1D grid
    SamplePrior(PriorCmd),
    /// Log-density table of a checkpoint over an (x, y) grid
    Density(DensityCmd),
}

#[derive(Args)]
struct TrainArgs {
    /// flat key=value file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    target_col: Option<String>,
    #[arg(long)]
    split_seed: Option<String>,
    #[arg(long)]
    split_index: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    natgrad_lr: Option<String>,
    #[arg(long)]
    anneal: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// any other config key, as key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// defaults to the source recorded in the checkpoint
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    split_index: Option<u64>,
    #[arg(long, default_value_t = deepdens::predict::DEFAULT_PREDICT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// defaults to eval.json next to the checkpoint
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PriorCmd {
    #[arg(long)]
    model: String,
    /// lo:hi:n
    #[arg(long, default_value = "-3:3:100", allow_hyphen_values = true)]
    grid: String,
    #[arg(long, default_value_t = 1)]
    paths: usize,
    #[arg(long, default_value_t = 32)]
    num_inducing: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "prior_samples.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct DensityCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// lo:hi:n on the standardized input scale
    #[arg(long, default_value = "-2:2:50", allow_hyphen_values = true)]
    x_grid: String,
    /// lo:hi:n on the standardized target scale
    #[arg(long, default_value = "-3:3:100", allow_hyphen_values = true)]
    y_grid: String,
    #[arg(long, default_value_t = deepdens::predict::DEFAULT_PREDICT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "density.csv")]
    out: PathBuf,
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        if !path.exists() {
            return Err(Error::FileNotFound(path.display().to_string()));
        }
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    let flags = [
        ("model", &a.model),
        ("objective", &a.objective),
        ("k", &a.k),
        ("data", &a.data),
        ("target_col", &a.target_col),
        ("split_seed", &a.split_seed),
        ("split_index", &a.split_index),
        ("steps", &a.steps),
        ("batch", &a.batch),
        ("lr", &a.lr),
        ("natgrad_lr", &a.natgrad_lr),
        ("anneal", &a.anneal),
        ("seed", &a.seed),
        ("out", &a.out),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for kv in &a.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DEEPDENS_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| Error::Config(format!("DEEPDENS_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(Error::Config("DEEPDENS_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => {
            let cfg = run_config(&a)?;
            let out = cmd_train(&cfg)?;
            println!("{}", describe(&cfg, &out));
        }
        Command::Eval(a) => {
            let (report, path) = cmd_eval(&EvalArgs {
                checkpoint: &a.checkpoint,
                data: a.data.as_deref(),
                split_seed: a.split_seed,
                split_index: a.split_index,
                samples: a.samples,
                seed: a.seed,
                out: a.out.as_deref(),
            })?;
            println!(
                "test log-likelihood {:.4} ± {:.4} nats/point over {} points, median Shapiro–Wilk {:.4}; report {}",
                report.mean_loglik,
                report.std_err,
                report.num_points,
                report.median_shapiro_wilk,
                path.display()
            );
        }
        Command::Aggregate { reports } => {
            let agg = cmd_aggregate(&reports)?;
            println!("{}", serde_json::to_string_pretty(&agg).map_err(|e| Error::Io(e.to_string()))?);
        }
        Command::SamplePrior(a) => {
            let rows = cmd_sample_prior(&PriorArgs {
                model: &a.model,
                grid: &a.grid,
                paths: a.paths,
                num_inducing: a.num_inducing,
                seed: a.seed,
                out: &a.out,
            })?;
            println!("wrote {rows} rows to {}", a.out.display());
        }
        Command::Density(a) => {
            let rows = cmd_density(&DensityArgs {
                checkpoint: &a.checkpoint,
                x_grid: &a.x_grid,
                y_grid: &a.y_grid,
                samples: a.samples,
                seed: a.seed,
                out: &a.out,
            })?;
            println!("wrote {rows} rows to {}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
