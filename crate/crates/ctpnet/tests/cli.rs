//! End-to-end checks of the command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ctpnet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_synth_csv(dir: &Path) -> PathBuf {
    let path = dir.join("synth24.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "date,a,b").unwrap();
    let mut s = 0x7c4dffu64;
    let mut noise = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.1
    };
    for t in 0..1200 {
        let tau = 2.0 * std::f64::consts::PI * t as f64 / 24.0;
        writeln!(f, "{t},{:.6},{:.6}", tau.sin() + noise(), tau.cos() + 0.5 + noise()).unwrap();
    }
    path
}

fn write_config(dir: &Path, csv: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let body = format!(
        r#"{{
  "csv": "{}",
  "dataset": "synth",
  "l_in": 48, "l_out": 24, "w": 24,
  "d": 8, "h_c": 2, "h_b": 2,
  "max_epochs": 2, "patience": 2, "batch_size": 32, "seed": 3,
  "results_csv": "{}",
  "checkpoint": "{}",
  "record_json": "{}"{}
}}"#,
        csv.display(),
        dir.join("results.csv").display(),
        dir.join("model.ckpt").display(),
        dir.join("run.json").display(),
        extra,
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn detect_period_prints_24() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_synth_csv(dir.path());
    let out = run(&["detect-period", csv.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "24");
}

#[test]
fn train_rejects_indivisible_period_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_synth_csv(dir.path());
    let cfg = write_config(dir.path(), &csv, ",\n  \"p\": 7");
    let out = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nearest valid periods"), "{stderr}");
}

#[test]
fn train_evaluate_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_synth_csv(dir.path());
    let cfg = write_config(dir.path(), &csv, "");

    let out = run(&["train", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let train_metrics = stdout
        .lines()
        .find(|l| l.starts_with("test_metrics "))
        .expect("metrics line")
        .to_string();

    // results CSV got its header and one row
    let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "dataset,horizon,variant,interval,seed,mse,mae,epochs,wall_s");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("synth,24,full,"));

    // the saved record carries the same metrics
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap())
            .unwrap();
    assert_eq!(record["dataset"], "synth");
    assert!(record["test"]["mse"].as_f64().unwrap() > 0.0);

    // evaluate on the checkpoint reproduces the metrics bit-exactly
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&["evaluate", ckpt.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval_stdout = String::from_utf8_lossy(&out.stdout);
    let eval_metrics = eval_stdout
        .lines()
        .find(|l| l.starts_with("test_metrics "))
        .expect("metrics line");
    assert_eq!(eval_metrics, train_metrics);

    // predict writes horizon rows in original units
    let forecast = dir.path().join("forecast.csv");
    let out = run(&[
        "predict",
        ckpt.to_str().unwrap(),
        csv.to_str().unwrap(),
        "--out",
        forecast.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&forecast).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "a,b");
    assert_eq!(lines.len(), 1 + 24);
    for line in &lines[1..] {
        for cell in line.split(',') {
            let v: f64 = cell.parse().unwrap();
            assert!(v.is_finite());
        }
    }
}

#[test]
fn ablate_and_sweep_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_synth_csv(dir.path());
    let cfg_path = dir.path().join("grid.json");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{
  "csv": "{}", "dataset": "synth",
  "l_in": 48, "l_out": 24, "p": 24, "w": 24,
  "d": 8, "h_c": 2, "h_b": 2,
  "max_epochs": 1, "patience": 1, "batch_size": 64, "seed": 0,
  "horizons": [24], "intervals": [24, 5],
  "results_csv": "{}"
}}"#,
            csv.display(),
            dir.path().join("grid_results.csv").display()
        ),
    )
    .unwrap();

    let out = run(&["ablate", cfg_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| MSE |"), "{table}");
    assert!(table.contains("no_i2_i3"));

    let out = run(&["sweep-interval", cfg_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("skipped interval 5"), "{stderr}");
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| 24 |"), "{table}");

    // 7 ablation rows + 1 sweep row, one shared header
    let results = std::fs::read_to_string(dir.path().join("grid_results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 7 + 1);
}

#[test]
fn diverged_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_synth_csv(dir.path());
    let cfg = write_config(dir.path(), &csv, ",\n  \"lr\": 1e200");
    let out = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("diverged"), "{stderr}");
}

#[test]
fn training_is_reproducible_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_synth_csv(dir.path());
    let mut metrics = Vec::new();
    for attempt in 0..2 {
        let cfg_path = dir.path().join(format!("cfg{attempt}.json"));
        std::fs::write(
            &cfg_path,
            format!(
                r#"{{
  "csv": "{}", "dataset": "synth",
  "l_in": 48, "l_out": 24, "p": 24, "w": 24,
  "d": 8, "h_c": 2, "h_b": 2,
  "max_epochs": 2, "patience": 2, "batch_size": 32, "seed": 11,
  "results_csv": "{}"
}}"#,
                csv.display(),
                dir.path().join(format!("res{attempt}.csv")).display()
            ),
        )
        .unwrap();
        let out = run(&["train", cfg_path.to_str().unwrap()]);
        assert!(out.status.success());
        let stdout = String::from_utf8_lossy(&out.stdout);
        metrics.push(
            stdout
                .lines()
                .find(|l| l.starts_with("test_metrics "))
                .unwrap()
                .to_string(),
        );
    }
    assert_eq!(metrics[0], metrics[1], "same seed, different metrics");
}

#[test]
fn missing_paths_exit_1() {
    let out = run(&["detect-period", "/nonexistent/file.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["train", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(1));
}
