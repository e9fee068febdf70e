use std::path::Path;
use std::process::{Command, Output};

use gmsm::config::KeyValues;
use gmsm::experiment::{Experiment, ExperimentConfig, Scale};

fn gmsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmsm"))
        .args(args)
        .env("GMSM_THREADS", "2")
        .output()
        .unwrap()
}

fn small_config(dir: &Path, experiment: Experiment) -> std::path::PathBuf {
    let mut o = KeyValues::new();
    o.set("sim.m", 3000);
    o.set("sim.dt", 0.01);
    o.set("basis.bins", if experiment == Experiment::SevenWell { "8,8" } else { "12" });
    o.set("output.dir", dir.join("out").display());
    let cfg = experiment.config(Scale::Paper).unwrap().with(&o).unwrap();
    let path = dir.join("small.kv");
    cfg.write(&path).unwrap();
    path
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

#[test]
fn zero_pairs_fails_with_error_json_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), Experiment::DoubleWell);
    let text = std::fs::read_to_string(&path).unwrap().replace("sim.m = 3000", "sim.m = 0");
    std::fs::write(&path, text).unwrap();
    let out = gmsm(&["--config", path.to_str().unwrap(), "run"]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["kind"], "InvalidConfig");
    assert_eq!(err["field"], "sim.m");
}

#[test]
fn unknown_experiment_is_reported() {
    let out = gmsm(&["reproduce", "four-well"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["kind"], "UnknownExperiment");
}

#[test]
fn left_right_needs_a_density_initial_distribution() {
    let out = gmsm(&["reproduce", "double-well", "--init", "left-right"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["field"], "init");
}

#[test]
fn staged_verbs_match_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), Experiment::DoubleWell);
    let cfg = path.to_str().unwrap();
    for verb in ["simulate", "estimate", "spectrum", "cluster", "msm"] {
        let out = gmsm(&["--config", cfg, verb]);
        assert!(out.status.success(), "{verb}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out_dir = dir.path().join("out");
    for file in [
        "pairs.csv",
        "pairs.json",
        "config.kv",
        "basis0.kv",
        "c00.csv",
        "c01.csv",
        "c11.csv",
        "t_k.csv",
        "gmsm.json",
        "spectrum.json",
        "labels.csv",
        "cells0.csv",
        "msm_transition.csv",
        "potential.csv",
        "report.json",
    ] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let staged = std::fs::read_to_string(out_dir.join("report.json")).unwrap();

    let out = gmsm(&["--config", cfg, "run"]);
    assert!(out.status.success());
    let single = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    assert_eq!(staged, single);

    let report: serde_json::Value = serde_json::from_str(&single).unwrap();
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(
        report["config"].as_str().unwrap(),
        std::fs::read_to_string(&path).unwrap()
    );
}

#[test]
fn same_config_and_seed_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), Experiment::TripleWell);
    let run = |seed: &str| {
        let out = gmsm(&["--config", path.to_str().unwrap(), "--seed", seed, "run"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.path().join("out/report.json")).unwrap()
    };
    let a = run("4");
    let b = run("4");
    let c = run("5");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn written_config_reads_back_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), Experiment::SevenWell);
    let out = gmsm(&["--config", path.to_str().unwrap(), "--k", "5", "simulate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = dir.path().join("out/config.kv");
    let text = std::fs::read_to_string(&written).unwrap();
    assert!(text.contains("estimator.k = 5"));
    let again = ExperimentConfig::read(&written).unwrap();
    assert_eq!(again.to_string(), text);
}
