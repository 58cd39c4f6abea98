use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn negw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_negw"))
        .args(args)
        .env_remove("EGW_THREADS")
        .output()
        .expect("binary runs")
}

fn json_out(o: &Output) -> Value {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FAST: [&str; 6] = ["--k", "4", "--max-outer", "3", "--final-epochs", "20"];

#[test]
fn gen_writes_shape_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = negw(&[
            "gen",
            "--dist",
            "uniform-cube",
            "--d",
            "8",
            "--n",
            "1024",
            "--seed",
            "1",
            "--out",
            p(out),
        ]);
        let meta = json_out(&o);
        assert_eq!(meta["n"], 1024);
        assert_eq!(meta["schema"], 1);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1024);
    assert!(text.lines().all(|l| l.split(',').count() == 8));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(a.with_extension("json").exists());
}

#[test]
fn gen_rejects_zero_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let o = negw(&[
        "gen",
        "--dist",
        "uniform-cube",
        "--d",
        "0",
        "--n",
        "4",
        "--out",
        p(&dir.path().join("x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_point_files_give_zero_total() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    fs::write(&x, "0.5,-1.0\n").unwrap();
    let o = negw(&["estimate", "--x", p(&x), "--y", p(&x)]);
    assert_eq!(json_out(&o)["total"], 0.0);
}

#[test]
fn inner_kind_on_gaussian_data_has_scalar_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    let y = dir.path().join("y.csv");
    json_out(&negw(&[
        "gen",
        "--dist",
        "gaussian-iso",
        "--d",
        "1",
        "--n",
        "40",
        "--seed",
        "1",
        "--out",
        p(&x),
    ]));
    json_out(&negw(&[
        "gen",
        "--dist",
        "gaussian-iso",
        "--var",
        "0.25",
        "--d",
        "1",
        "--n",
        "40",
        "--seed",
        "2",
        "--out",
        p(&y),
    ]));
    let plan = dir.path().join("plan.csv");
    let mut args = vec![
        "estimate",
        "--x",
        p(&x),
        "--y",
        p(&y),
        "--kind",
        "inner",
        "--eps",
        "0.5",
        "--init-fill",
        "0.25",
        "--plan-out",
        p(&plan),
    ];
    args.extend(FAST);
    let v = json_out(&negw(&args));
    let a = v["a_star"].as_array().unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].as_array().unwrap().len(), 1);
    assert_eq!(fs::read_to_string(&plan).unwrap().lines().count(), 40);
    assert!(plan.with_extension("json").exists());
}

#[test]
fn deterministic_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    let y = dir.path().join("y.csv");
    json_out(&negw(&[
        "gen",
        "--dist",
        "uniform-cube",
        "--d",
        "2",
        "--n",
        "30",
        "--seed",
        "3",
        "--out",
        p(&x),
    ]));
    json_out(&negw(&[
        "gen",
        "--dist",
        "gaussian",
        "--d",
        "3",
        "--n",
        "30",
        "--seed",
        "4",
        "--out",
        p(&y),
    ]));
    let mut args = vec![
        "--deterministic",
        "--seed",
        "7",
        "estimate",
        "--x",
        p(&x),
        "--y",
        p(&y),
    ];
    args.extend(FAST);
    let a = negw(&args);
    let b = Command::new(env!("CARGO_BIN_EXE_negw"))
        .args(&args)
        .env("EGW_THREADS", "1")
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(!String::from_utf8_lossy(&a.stdout).contains("elapsed_seconds"));
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    json_out(&negw(&[
        "gen",
        "--dist",
        "uniform-cube",
        "--d",
        "1",
        "--n",
        "12",
        "--out",
        p(&x),
    ]));
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"kind": "inner_product", "eps": 0.7, "k_neurons": 3, "epochs": 2, "batch": 4, "rate": 0.02, "max_outer": 2, "grad_tol": 1e-6, "seed": 4, "projection": false, "auto_eps": false}"#,
    )
    .unwrap();
    let trace = dir.path().join("trace.csv");
    let v = json_out(&negw(&[
        "--config",
        p(&cfg),
        "estimate",
        "--x",
        p(&x),
        "--y",
        p(&x),
        "--max-outer",
        "1",
        "--trace-out",
        p(&trace),
    ]));
    assert_eq!(v["kind"], "inner_product");
    assert_eq!(v["eps"], 0.7);
    assert_eq!(v["options"]["k_neurons"], 3);
    assert_eq!(v["options"]["plan"]["batch_size"], 4);
    assert_eq!(v["options"]["seed"], 4);
    assert_eq!(v["options"]["max_outer"], 1);
    let lines: Vec<String> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines[0], "iteration,objective,grad_norm");
    assert_eq!(lines.len(), 1 + v["trace"].as_array().unwrap().len());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    fs::write(&x, "0.1\n0.2\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"neurons": 3}"#).unwrap();
    let o = negw(&["--config", p(&cfg), "estimate", "--x", p(&x), "--y", p(&x)]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "json");
}

#[test]
fn rate_stub_reports_half_slope_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let v = json_out(&negw(&[
        "--out-dir",
        p(&out),
        "rate",
        "--stub",
        "0.4",
        "--runs",
        "1",
    ]));
    assert!((v["fit"]["slope"].as_f64().unwrap() + 0.5).abs() < 1e-12);
    let summary = fs::read_to_string(out.join("rate_summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "n,mean_err");
    assert_eq!(summary.lines().count(), 7);
    assert!(out.join("rate_cells.csv").exists());
    assert!(out.join("rate.json").exists());
}

#[test]
fn rate_rejects_short_grid() {
    let o = negw(&["rate", "--stub", "1", "--n-grid", "10,20"]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "validation");
    assert_eq!(err["status"], "error");
}

#[test]
fn oracle_compare_single_point() {
    let v = json_out(&negw(&["oracle-compare", "--n", "1"]));
    assert_eq!(v["ne_total"], 0.0);
    assert_eq!(v["oracle_total"], 0.0);
    assert_eq!(v["rel_gap"], 0.0);
    assert_eq!(v["restricted_sup_ok"], true);
}

#[test]
fn invariance_with_identity_reports_every_cell() {
    let mut args = vec![
        "invariance",
        "--identity",
        "--d",
        "2",
        "--n-grid",
        "8,16",
        "--runs",
        "1",
        "--init-fill",
        "0.25",
    ];
    args.extend(FAST);
    let v = json_out(&negw(&args));
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c["gap"].as_f64().unwrap() >= 0.0));
    assert_eq!(v["mean_gaps"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_input_reports_io_failure() {
    let o = negw(&[
        "estimate",
        "--x",
        "/nonexistent/x.csv",
        "--y",
        "/nonexistent/y.csv",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "io");
}

#[test]
fn malformed_csv_reports_row() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    fs::write(&x, "1,2\n3,abc\n").unwrap();
    let o = negw(&["estimate", "--x", p(&x), "--y", p(&x)]);
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "parse");
    assert!(err["message"].as_str().unwrap().contains("row 2"));
}
