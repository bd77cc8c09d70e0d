//! The command-line pipeline: simulate, train, predict, evaluate, and the
//! persistence guarantees behind it.

mod common;

use std::fs;
use std::path::Path;

use common::rel_err_vec;
use magma::cli::run;
use magma::io::{self, load_model, save_model};
use magma::prediction::{predict, PredictConfig};
use magma::simeval::{simulate_dataset, SimConfig};
use magma::training::{train_em, TrainingConfig};
use tempfile::tempdir;

fn run_ok(args: &[&str]) {
    let code = run(args.iter().map(|s| s.to_string()));
    assert_eq!(code, 0, "command failed: {args:?}");
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn simulate_twice_is_identical() {
    let tmp = tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "magma",
            "simulate",
            "--seed",
            "1",
            "--m",
            "3",
            "--n-i",
            "8",
            "--n-grid",
            "25",
            "--n-obs",
            "5",
            "--n-test",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(dir_snapshot(&a), dir_snapshot(&b));
}

#[test]
fn full_pipeline_produces_valid_report() {
    let tmp = tempdir().unwrap();
    let sim = tmp.path().join("sim");
    run_ok(&[
        "magma",
        "simulate",
        "--seed",
        "7",
        "--m",
        "5",
        "--n-i",
        "12",
        "--n-grid",
        "40",
        "--n-obs",
        "8",
        "--n-test",
        "4",
        "--out",
        sim.to_str().unwrap(),
    ]);
    let model = tmp.path().join("model.json");
    run_ok(&[
        "magma",
        "train",
        "--data",
        sim.join("train.csv").to_str().unwrap(),
        "--mode",
        "common",
        "--m0",
        "const:0",
        "--seed",
        "7",
        "--out",
        model.to_str().unwrap(),
    ]);

    // targets: the test timestamps from the generated split
    let truth = io::load_dataset(&sim.join("new_test.csv")).unwrap();
    let targets: Vec<String> = truth.individuals()[0]
        .timestamps()
        .iter()
        .map(|t| t.to_string())
        .collect();
    let pred = tmp.path().join("pred.csv");
    run_ok(&[
        "magma",
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--data",
        sim.join("train.csv").to_str().unwrap(),
        "--new-obs",
        sim.join("new_obs.csv").to_str().unwrap(),
        "--targets",
        &targets.join(","),
        "--out",
        pred.to_str().unwrap(),
    ]);

    // row count contract: one row per requested target
    let rows = io::read_prediction(&pred).unwrap();
    assert_eq!(rows.len(), targets.len());
    for r in &rows {
        assert!(r.sd >= 0.0);
        assert!(r.ci95_lo <= r.mean && r.mean <= r.ci95_hi);
    }

    let report_path = tmp.path().join("report.json");
    run_ok(&[
        "magma",
        "evaluate",
        "--pred",
        pred.to_str().unwrap(),
        "--truth",
        sim.join("new_test.csv").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    let coverage = report["ci95_coverage"].as_f64().unwrap();
    let mse = report["mse"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&coverage));
    assert!(mse >= 0.0);
    assert_eq!(report["n_points"].as_u64().unwrap(), targets.len() as u64);
}

#[test]
fn model_roundtrip_is_byte_identical_and_predicts_identically() {
    let tmp = tempdir().unwrap();
    let ds = simulate_dataset(&SimConfig {
        seed: 33,
        m: 4,
        n_pooled: 30,
        n_i: 10,
        n_obs: 6,
        n_test: 4,
        ..Default::default()
    })
    .unwrap();
    let model = train_em(&ds.training, &TrainingConfig::default()).unwrap();

    let p1 = tmp.path().join("m1.json");
    let p2 = tmp.path().join("m2.json");
    save_model(&model, &p1).unwrap();
    let loaded = load_model(&p1).unwrap();
    save_model(&loaded, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    // every numeric field survives bit-exactly
    assert_eq!(model.hp, loaded.hp);
    assert_eq!(model.hyper_posterior.grid(), loaded.hyper_posterior.grid());
    assert_eq!(model.hyper_posterior.mean(), loaded.hyper_posterior.mean());
    assert_eq!(model.hyper_posterior.cov(), loaded.hyper_posterior.cov());
    assert_eq!(model.diagnostics, loaded.diagnostics);

    // and predictions agree to well below 1e-12
    let (test_t, _) = ds.new_test();
    let a = predict(
        &model,
        &ds.training,
        &ds.new_observed(),
        &test_t,
        &PredictConfig::default(),
    )
    .unwrap();
    let b = predict(
        &loaded,
        &ds.training,
        &ds.new_observed(),
        &test_t,
        &PredictConfig::default(),
    )
    .unwrap();
    assert!(rel_err_vec(&a.mean, &b.mean) < 1e-12);
}

#[test]
fn benchmark_command_writes_reports() {
    let tmp = tempdir().unwrap();
    let out = tmp.path().join("bench");
    run_ok(&[
        "magma",
        "benchmark",
        "--runs",
        "2",
        "--m",
        "3",
        "--n-i",
        "8",
        "--n-obs",
        "5",
        "--n-test",
        "3",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3); // header + 2 runs
    let agg: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["n_ok"].as_u64().unwrap(), 2);
}

#[test]
fn predict_without_observations_runs() {
    let tmp = tempdir().unwrap();
    let sim = tmp.path().join("sim");
    run_ok(&[
        "magma",
        "simulate",
        "--seed",
        "9",
        "--m",
        "3",
        "--n-i",
        "8",
        "--n-grid",
        "25",
        "--n-obs",
        "5",
        "--n-test",
        "3",
        "--out",
        sim.to_str().unwrap(),
    ]);
    let model = tmp.path().join("model.json");
    run_ok(&[
        "magma",
        "train",
        "--data",
        sim.join("train.csv").to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    let pred = tmp.path().join("pred.csv");
    run_ok(&[
        "magma",
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--data",
        sim.join("train.csv").to_str().unwrap(),
        "--targets",
        "1.0,2.0,3.0",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(io::read_prediction(&pred).unwrap().len(), 3);
}

/// Duplicate rows and malformed rows surface their line numbers through the
/// CLI error channel (nonzero exit).
#[test]
fn cli_surfaces_data_errors() {
    let tmp = tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(
        &bad,
        "individual_id,timestamp,output\na,1.0,1.0\na,1.0,2.0\n",
    )
    .unwrap();
    let model = tmp.path().join("m.json");
    let code = run([
        "magma".to_string(),
        "train".into(),
        "--data".into(),
        bad.to_str().unwrap().into(),
        "--out".into(),
        model.to_str().unwrap().into(),
    ]);
    assert_eq!(code, 1);
}
