use std::path::Path;
use std::process::{Command, Output};

use deepdens_cli::commands::{EvalFile, EXIT_CONFIG, EXIT_DATA};

fn deepdens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepdens")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A short LV-GP-GP run on the bimodal generator.
fn train_small(out: &Path, seed: &str) -> Output {
    deepdens(&[
        "train",
        "--model",
        "LV-GP-GP",
        "--objective",
        "iwvi",
        "--k",
        "5",
        "--data",
        "synth:bimodal:400",
        "--steps",
        "60",
        "--batch",
        "64",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "num_inducing=16",
        "--set",
        "log_every=1",
    ])
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train_small(&out, "1");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("model.json").exists());
    assert!(out.join("config.txt").exists());
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 60);
    assert!(String::from_utf8_lossy(&o.stdout).contains("LV-GP-GP with per-point latents"));
}

#[test]
fn unknown_layer_token_is_named() {
    let o = deepdens(&["train", "--model", "LV-GQ-GP", "--data", "synth:bimodal:50"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("GQ"), "{}", stderr(&o));
}

#[test]
fn config_file_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "model=GP\nsteps=ten\n").unwrap();
    let o = deepdens(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn rerun_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_small(&a, "3").status.success());
    assert!(train_small(&b, "3").status.success());
    assert_eq!(std::fs::read(a.join("metrics.jsonl")).unwrap(), std::fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn eval_reports_finite_numbers_and_checks_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_small(&run, "2").status.success());
    let ck = run.join("model.json");
    let o = deepdens(&["eval", "--checkpoint", ck.to_str().unwrap(), "--samples", "200"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: EvalFile = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert!(report.num_points > 0);
    assert!(report.mean_loglik.is_finite() && report.std_err.is_finite() && report.median_shapiro_wilk.is_finite());
    assert!(report.per_point_loglik.iter().chain(&report.shapiro_wilk).all(|v| v.is_finite()));

    let csv = dir.path().join("wide.csv");
    let rows: String = (0..30).map(|i| format!("{},{},{}\n", i as f64 * 0.1, 1.0 - i as f64 * 0.05, (i as f64).sin())).collect();
    std::fs::write(&csv, format!("a,b,y\n{rows}")).unwrap();
    let o = deepdens(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(stderr(&o).contains("D = 1"), "{}", stderr(&o));
}

#[test]
fn aggregate_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let values = [-1.2, -0.8, -1.0, -0.7, -1.3];
    let sw = [0.9, 0.95, 0.92, 0.97, 0.91];
    let mut paths = Vec::new();
    for (i, (&ll, &w)) in values.iter().zip(&sw).enumerate() {
        let f = EvalFile {
            mean_loglik: ll,
            std_err: 0.0,
            median_shapiro_wilk: w,
            num_points: 1,
            split_seed: 0,
            split_index: i as u64,
            per_point_loglik: vec![ll],
            shapiro_wilk: vec![w],
        };
        let p = dir.path().join(format!("eval{i}.json"));
        std::fs::write(&p, serde_json::to_string(&f).unwrap()).unwrap();
        paths.push(p.to_str().unwrap().to_string());
    }
    let mut args = vec!["aggregate"];
    args.extend(paths.iter().map(String::as_str));
    let o = deepdens(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let agg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // mean -1.0; deviations -0.2, 0.2, 0, 0.3, -0.3 → sample variance 0.26 / 4
    let se = (0.26f64 / 4.0).sqrt() / 5f64.sqrt();
    assert!((agg["mean_loglik"]["mean"].as_f64().unwrap() + 1.0).abs() < 1e-12);
    assert!((agg["mean_loglik"]["std_err"].as_f64().unwrap() - se).abs() < 1e-12);
    assert_eq!(agg["mean_loglik"]["count"].as_u64(), Some(5));
    assert!((agg["median_shapiro_wilk"]["mean"].as_f64().unwrap() - 0.93).abs() < 1e-12);

    let o = deepdens(&["aggregate", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
}

fn read_rows(p: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn prior_samples_have_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gp.csv");
    let o = deepdens(&["sample-prior", "--model", "GP", "--grid", "-3:3:100", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_rows(&out);
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.len() == 3 && r[2].is_finite()));
}

#[test]
fn latent_prior_differs_at_repeated_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lv.csv");
    // ten points at x = 0.5
    let o = deepdens(&["sample-prior", "--model", "LV-GP", "--grid", "0.5:0.5:10", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_rows(&out);
    assert!(rows.iter().all(|r| r[1] == 0.5));
    let distinct = rows.iter().filter(|r| (r[2] - rows[0][2]).abs() > 1e-6).count();
    assert!(distinct > 0, "{rows:?}");

    let again = dir.path().join("lv2.csv");
    deepdens(&["sample-prior", "--model", "LV-GP", "--grid", "0.5:0.5:10", "--seed", "4", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn density_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_small(&run, "5").status.success());
    let out = dir.path().join("density.csv");
    let o = deepdens(&[
        "density",
        "--checkpoint",
        run.join("model.json").to_str().unwrap(),
        "--x-grid",
        "-1:1:10",
        "--y-grid",
        "-2:2:10",
        "--samples",
        "300",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_rows(&out);
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r[2].is_finite()));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let o = deepdens(&["eval", "--checkpoint", "/nonexistent/model.json"]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(stderr(&o).contains("/nonexistent/model.json"));
}
