use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use omitopics_cli::{cmd_train, RunConfig};

fn omitopics(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omitopics"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, epochs: usize) {
    let cfg = format!(r#"{{"model": {{"n_topics": 10, "encoder_hidden": 32}}, "train": {{"epochs": {epochs}}}}}"#);
    fs::write(dir.join("run.json"), cfg).unwrap();
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = omitopics(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--threads", "--out", "--scenario", "--poe-mode", "--no-ncl"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    for cmd in ["simulate", "train", "embed", "impute", "eval", "gradcheck"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(omitopics(&["train", "--frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(omitopics(&["--poe-mode", "other", "gradcheck"], dir.path()).status.code(), Some(2));
}

#[test]
fn config_problems_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{not json").unwrap();
    let out = omitopics(&["--config", "bad.json", "gradcheck"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = omitopics(&["train", "--dataset", "missing"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not exist"));
    let out = omitopics(&["simulate", "--preset", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_rejects_more_types_than_topics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"{"name": "bad", "n_topics": 3, "embed_dim": 4,
        "modalities": [{"id": "GEX", "n_features": 5, "reads": 10}],
        "domains": [{"id": "a", "n_cells": 5, "available": ["GEX"]}],
        "n_cell_types": 5, "separation": 1.0}"#;
    fs::write(dir.path().join("spec.json"), spec).unwrap();
    let out = omitopics(&["simulate", "--spec", "spec.json", "--out", "sim"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("n_cell_types"));
}

#[test]
fn gradcheck_prints_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let out = omitopics(&["gradcheck"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    let errors: Vec<f64> = text.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(errors.len(), 2);
    assert!(errors.iter().all(|&e| e < 1e-4), "{text}");
    let out = omitopics(&["--poe-mode", "paper", "gradcheck"], dir.path());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}

#[test]
fn citeseq_pipeline_emits_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_config(p, 3);
    let ok = |args: &[&str]| {
        let out = omitopics(args, p);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    };
    ok(&["simulate", "--preset", "citeseq", "--out", "sim", "--seed", "2"]);
    for f in ["data/manifest.json", "truth/manifest.json", "scenario.json", "true_params.ckpt", "theta.tsv", "spec.json"] {
        assert!(p.join("sim").join(f).exists(), "{f}");
    }
    ok(&["--config", "run.json", "train", "--dataset", "sim/data", "--out", "fit", "--threads", "2"]);
    for f in ["model.ckpt", "train_log.ndjson", "run_config.json"] {
        assert!(p.join("fit").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(p.join("fit/train_log.ndjson")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains(r#""kind":"epoch""#)).count(), 3);

    ok(&["embed", "--checkpoint", "fit/model.ckpt", "--dataset", "sim/data", "--out", "fit"]);
    let emb = fs::read_to_string(p.join("fit/embedding.tsv")).unwrap();
    // Header plus one row per cell; citeseq has 4 x 200 cells.
    assert_eq!(emb.lines().count(), 1 + 800);

    ok(&["impute", "--checkpoint", "fit/model.ckpt", "--dataset", "sim/data", "--domain", "3", "--modality", "GEX", "--out", "fit"]);
    let imp = fs::read_to_string(p.join("fit/imputed_3_GEX.tsv")).unwrap();
    assert_eq!(imp.lines().count(), 1 + 200);
    let row: Vec<f64> = imp.lines().nth(1).unwrap().split('\t').skip(1).map(|x| x.parse().unwrap()).collect();
    assert_eq!(row.len(), 60);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    ok(&["eval", "--checkpoint", "fit/model.ckpt", "--dataset", "sim/data", "--truth", "sim/truth", "--out", "fit"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("fit/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["domains"].as_array().unwrap().len(), 4);
    assert!(report["mean_imputation_pearson"].is_number());
}

#[test]
fn imputing_an_observed_modality_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_config(p, 1);
    assert!(omitopics(&["simulate", "--preset", "citeseq", "--out", "sim"], p).status.success());
    assert!(omitopics(&["--config", "run.json", "train", "--dataset", "sim/data", "--out", "fit"], p).status.success());
    let out = omitopics(&["impute", "--checkpoint", "fit/model.ckpt", "--dataset", "sim/data", "--domain", "1", "--modality", "GEX"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("observed"));
}

#[test]
fn scenario_flag_masks_and_keeps_truth() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_config(p, 1);
    assert!(omitopics(&["simulate", "--preset", "citeseq", "--out", "sim"], p).status.success());
    fs::write(p.join("mask.json"), r#"{"name": "drop-adt-2", "masks": [{"domain": "2", "modality": "ADT"}]}"#).unwrap();
    let args = ["--config", "run.json", "--scenario", "mask.json", "train", "--dataset", "sim/data", "--out", "fit"];
    assert!(omitopics(&args, p).status.success());
    assert!(p.join("fit/truth/manifest.json").exists());
    let out = omitopics(&["--scenario", "mask.json", "eval", "--checkpoint", "fit/model.ckpt", "--dataset", "sim/data", "--out", "fit"], p);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = fs::read_to_string(p.join("fit/eval_report.json")).unwrap();
    assert!(report.contains("drop-adt-2"));
}

#[test]
fn repeated_invocations_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_config(p, 2);
    for run in ["a", "b"] {
        let sim = format!("sim_{run}");
        assert!(omitopics(&["simulate", "--preset", "citeseq", "--seed", "5", "--out", &sim], p).status.success());
        let data = format!("{sim}/data");
        let fit = format!("fit_{run}");
        let threads = if run == "a" { "1" } else { "3" };
        let args = ["--config", "run.json", "--seed", "5", "--threads", threads, "train", "--dataset", &data, "--out", &fit];
        assert!(omitopics(&args, p).status.success());
    }
    let same = |f: &str| fs::read(p.join("sim_a").join(f)).unwrap() == fs::read(p.join("sim_b").join(f)).unwrap();
    assert!(same("data/m0_features.txt") && same("true_params.ckpt") && same("theta.tsv"));
    for f in ["model.ckpt", "train_log.ndjson"] {
        assert_eq!(fs::read(p.join("fit_a").join(f)).unwrap(), fs::read(p.join("fit_b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn cmd_train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_config(p, 2);
    assert!(omitopics(&["simulate", "--preset", "citeseq", "--out", "sim"], p).status.success());
    let mut cfg = RunConfig::from_file(&p.join("run.json")).unwrap();
    cfg.dataset = Some(p.join("sim/data"));
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        cfg.out = p.join(run);
        let art = cmd_train(&cfg).unwrap();
        outputs.push((fs::read(art.checkpoint).unwrap(), fs::read(art.log).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}
