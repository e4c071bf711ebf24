use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn streamspeech(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_streamspeech"));
    cmd.args(args).env_remove("STREAMSPEECH_OUT_DIR");
    if let Some(dir) = out_dir {
        cmd.env("STREAMSPEECH_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn simulate_reports_breakdown() {
    let out = streamspeech(&["simulate", "--timing", "table7b", "--R", "3", "--W", "10"], None);
    assert!(out.status.success());
    let v = json(&out);
    assert!((v["breakdown"]["total_ms"].as_f64().unwrap() - 582.92).abs() <= 0.02);
    assert!((v["breakdown"]["llm_ms"].as_f64().unwrap() - 231.16).abs() < 1e-9);
}

#[test]
fn simulate_timeline_with_affine_models() {
    let out = streamspeech(
        &["simulate", "--timing", "affine7b", "--R", "3", "--W", "10", "--text-tokens", "12", "--speech-tokens", "45"],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let chunks = json(&out)["timeline"]["chunks"].as_array().unwrap().len();
    assert_eq!(chunks, 5);
}

#[test]
fn outputs_land_in_override_dir_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["datagen", "--count", "20", "--seed", "4", "--out", "corpus.jsonl"];
    assert!(streamspeech(&args, Some(dir.path())).status.success());
    let first = std::fs::read(dir.path().join("corpus.jsonl")).unwrap();
    assert!(streamspeech(&args, Some(dir.path())).status.success());
    assert_eq!(std::fs::read(dir.path().join("corpus.jsonl")).unwrap(), first);
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 20);

    let args = ["schedule", "--N", "6", "--M", "25", "--out", "schedule.json"];
    assert!(streamspeech(&args, Some(dir.path())).status.success());
    let written: Value = serde_json::from_slice(&std::fs::read(dir.path().join("schedule.json")).unwrap()).unwrap();
    assert_eq!(written["sequence"], "R3 W10 R3 W10 W5");
}

#[test]
fn failures_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = streamspeech(&["nonsense", "--out", "x.json"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    let out = streamspeech(&["simulate", "--timing", "table7b", "--R", "9", "--out", "x.json"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
    let out = streamspeech(&["eval", "--input", "missing.jsonl", "--out", "x.jsonl"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn eval_and_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("items.jsonl");
    std::fs::write(
        &input,
        concat!(
            r#"{"kind":"wer","id":"a","reference":"hello world","hypothesis":"hello there world"}"#,
            "\n",
            r#"{"kind":"qa","response":"It is Paris.","answers":["paris"]}"#,
            "\n",
        ),
    )
    .unwrap();
    let report = dir.path().join("report.jsonl");
    let out = streamspeech(&["eval", "--input", input.to_str().unwrap(), "--out", report.to_str().unwrap()], None);
    assert!(out.status.success());
    assert_eq!(json(&out)["corpus_wer"], 0.5);
    let rows = std::fs::read_to_string(&report).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.lines().last().unwrap().contains(r#""row":"corpus""#));

    let out = streamspeech(&["calibrate", "--stage", "tts"], None);
    assert!(out.status.success());
    assert!(json(&out)["max_abs_residual"].as_f64().unwrap() <= 4.1);
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, r#"{"policy":{"read":3,"write":10},"timing":"table7b"}"#).unwrap();
    assert!(streamspeech(&["validate", "--config", good.to_str().unwrap()], None).status.success());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"policy":{"read":0,"write":10},"timing":"table7b"}"#).unwrap();
    let out = streamspeech(&["validate", "--config", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("policy.read"));
    let out = streamspeech(&["simulate", "--config", good.to_str().unwrap()], None);
    assert!(out.status.success());
}
