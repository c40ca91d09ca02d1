use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pulsebp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pulsebp")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not a JSON line ({e}): {stderr}"))
}

#[test]
fn missing_input_is_a_data_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = pulsebp(&["preprocess", "--in", p(&missing), "--out", p(&dir.path().join("o.csv"))]);
    assert_eq!(out.status.code(), Some(4));
    let err = error_json(&out);
    assert_eq!(err["error"], "data");
    assert_eq!(err["path"], p(&missing));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let out = pulsebp(&["train", "--dataset"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
    let out = pulsebp(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pulsebp(&["pipeline", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_configs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    for text in [r#"{"train": {"epoch": 3}}"#, r#"{"model": {"pool_factor": 5}}"#, "{not json"] {
        std::fs::write(&cfg, text).unwrap();
        let out = pulsebp(&["--config", p(&cfg), "synth", "--out", p(&dir.path().join("r.csv"))]);
        assert_eq!(out.status.code(), Some(3), "{text}");
        let err = error_json(&out);
        assert_eq!(err["error"], "validation");
        assert_eq!(err["path"], p(&cfg));
    }
}

#[test]
fn help_documents_flags_and_defaults() {
    let out = pulsebp(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["synth", "preprocess", "segment", "features", "train", "cv", "predict", "evaluate", "pipeline"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    for cmd in ["synth", "preprocess", "segment", "features", "train", "cv", "predict", "evaluate", "pipeline"] {
        let text = String::from_utf8(pulsebp(&[cmd, "--help"]).stdout).unwrap();
        for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
            let flag = line.split_whitespace().next().unwrap();
            if ["--help", "--out", "--in", "--dataset", "--out-dir", "--cycles", "--record", "--checkpoint", "--predictions", "--input", "--config"]
                .contains(&flag)
            {
                continue;
            }
            // clap puts the description on the next line for long flags.
            let block: String = text.lines().skip_while(|l| *l != line).take(3).collect();
            assert!(block.contains("default"), "{cmd} {flag} has no documented default");
        }
    }
}

#[test]
fn stages_chain_and_predict_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let out = pulsebp(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let raw = d.join("raw.csv");
    run(&["synth", "--out", p(&raw), "--duration", "960", "--hr", "70", "--noise", "0.01", "--seed", "4"]);
    let clean = d.join("clean.csv");
    run(&["preprocess", "--in", p(&raw), "--out", p(&clean)]);
    assert!(d.join("clean.cleaning.json").exists());
    let cycles = d.join("cycles.json");
    run(&["segment", "--in", p(&clean), "--out", p(&cycles)]);
    let dataset = d.join("data.bin");
    run(&["features", "--cycles", p(&cycles), "--record", p(&clean), "--out", p(&dataset)]);
    let csv = d.join("data.csv");
    run(&["features", "--cycles", p(&cycles), "--record", p(&clean), "--out", p(&csv), "--format", "csv"]);

    let n = pulsebp_core::features::read_dataset(&dataset).unwrap().len();
    assert!(n > 10, "{n} samples");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), n + 1);

    let model = d.join("model");
    run(&["train", "--dataset", p(&dataset), "--out-dir", p(&model), "--epochs", "2", "--batch-size", "16", "--lr", "1e-3"]);
    let ckpt = std::fs::read_dir(&model)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "pfck"))
        .expect("checkpoint written");
    let preds = d.join("preds.csv");
    run(&["predict", "--checkpoint", p(&ckpt), "--dataset", p(&dataset), "--out", p(&preds)]);
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), n + 1);

    let report = d.join("report");
    run(&["evaluate", "--predictions", p(&preds), "--out-dir", p(&report)]);
    let json: Value = serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert!(json["sbp"]["mae_mmHg"].as_f64().unwrap().is_finite());
}

#[test]
fn short_record_is_rejected_as_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    assert!(pulsebp(&["synth", "--out", p(&raw), "--duration", "120"]).status.success());
    let out = pulsebp(&["preprocess", "--in", p(&raw), "--out", p(&dir.path().join("c.csv"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(dir.path().join("c.cleaning.json").exists());
}
