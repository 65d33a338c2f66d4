mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circuit_lens::synthetic::ToyConfig;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_circuit-lens"));
    c.env_remove("CIRCUIT_LENS_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("error record");
    serde_json::from_str(line).unwrap()
}

/// calibrate → table → discover into `out`, with the given worker count.
fn pipeline(fx: &common::Fixture, out: &Path, workers: &str) {
    let ck = s(&fx.checkpoint);
    ok(&[
        "calibrate",
        "--checkpoint",
        ck,
        "--calibration",
        s(&fx.calibration_text),
        "--anchor-token",
        "5",
        "--out",
        s(out),
        "--workers",
        workers,
    ]);
    let cal = out.join("calibration.json");
    ok(&[
        "table",
        "--checkpoint",
        ck,
        "--calibration",
        s(&cal),
        "--out",
        s(out),
        "--workers",
        workers,
    ]);
    ok(&[
        "discover",
        "--calibration",
        s(&cal),
        "--theta",
        "0.5",
        "--vocab",
        s(&common::vocab_path()),
        "--out",
        s(out),
        "--workers",
        workers,
    ]);
}

fn medium_fixture() -> common::Fixture {
    common::fixture(&ToyConfig::medium(), 3, 6, 256)
}

#[test]
fn inspect_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["inspect", "--synthetic", "--seed", "4", "--out", s(dir.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("d_model=48"));
    let v = json(&dir.path().join("inspect.json"));
    assert_eq!(v["schema_version"], 1);
    assert!(v["fold_check"]["attention_max_abs"].as_f64().unwrap() < 1e-10);
}

#[test]
fn inspect_checkpoint_with_env_output_dir() {
    let fx = medium_fixture();
    let out_dir = fx.dir.path().join("env-out");
    let out = bin()
        .args(["inspect", "--checkpoint", s(&fx.checkpoint)])
        .env("CIRCUIT_LENS_OUT", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v = json(&out_dir.join("inspect.json"));
    assert_eq!(v["dims"]["n_heads"], 12);
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let fx = medium_fixture();
    let runs: Vec<PathBuf> = ["1", "4", "1"]
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let out = fx.dir.path().join(format!("run{i}"));
            pipeline(&fx, &out, w);
            out
        })
        .collect();
    for name in ["calibration.json", "table.bin", "table.json", "neurons.json"] {
        let first = std::fs::read(runs[0].join(name)).unwrap();
        for r in &runs[1..] {
            assert_eq!(first, std::fs::read(r.join(name)).unwrap(), "{name} differs");
        }
    }
    let neurons = json(&runs[0].join("neurons.json"));
    assert_eq!(neurons["schema_version"], 1);
    let list = neurons["neurons"].as_array().unwrap();
    assert!(!list.is_empty());
    assert_eq!(list[0]["top"].as_array().unwrap().len(), 50);
}

#[test]
fn report_without_vocab_is_a_config_error() {
    let fx = medium_fixture();
    let out = fx.dir.path().join("run");
    pipeline(&fx, &out, "2");
    let before: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    let res = run(&["report", "--neuron", "3", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let rec = error_record(&res);
    assert_eq!(rec["error"], "ConfigError");
    assert_eq!(rec["schema_version"], 1);
    let after: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(before, after, "no artifact may be written on failure");

    let fresh = fx.dir.path().join("fresh");
    let res = run(&["report", "--neuron", "3", "--out", s(&fresh)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!fresh.exists());
}

#[test]
fn report_prints_tokens() {
    let fx = medium_fixture();
    let out = fx.dir.path().join("run");
    pipeline(&fx, &out, "2");
    let res = ok(&[
        "report",
        "--neuron",
        "3",
        "--width",
        "5",
        "--vocab",
        s(&common::vocab_path()),
        "--out",
        s(&out),
    ]);
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.starts_with("neuron 3"));
    let r = json(&out.join("report-3.json"));
    assert_eq!(r["top"].as_array().unwrap().len(), 5);
    let bad = run(&[
        "report",
        "--neuron",
        "64",
        "--vocab",
        s(&common::vocab_path()),
        "--out",
        s(&out),
    ]);
    assert_eq!(error_record(&bad)["error"], "NeuronOutOfRange");
}

#[test]
fn discover_refuses_foreign_calibration() {
    let fx = medium_fixture();
    let out = fx.dir.path().join("run");
    pipeline(&fx, &out, "2");
    let other = fx.dir.path().join("other");
    ok(&[
        "calibrate",
        "--checkpoint",
        s(&fx.checkpoint),
        "--calibration",
        s(&fx.corpus),
        "--text-index",
        "2",
        "--anchor-token",
        "5",
        "--out",
        s(&other),
    ]);
    let res = run(&[
        "discover",
        "--table",
        s(&out.join("table.bin")),
        "--calibration",
        s(&other.join("calibration.json")),
        "--out",
        s(&other),
    ]);
    assert_eq!(error_record(&res)["error"], "StaleTable");
    assert_eq!(res.status.code(), Some(71));
    assert!(!other.join("neurons.json").exists());
}

#[test]
fn score_and_validate() {
    let fx = medium_fixture();
    let out = fx.dir.path().join("run");
    pipeline(&fx, &out, "2");
    let cal = out.join("calibration.json");
    let res = ok(&[
        "score",
        "--neuron",
        "7",
        "--corpus",
        s(&fx.corpus),
        "--calibration",
        s(&cal),
        "--out",
        s(&out),
    ]);
    let csv = String::from_utf8_lossy(&res.stdout);
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(std::fs::read_to_string(out.join("score-7.csv")).unwrap(), csv);

    ok(&[
        "validate",
        "--checkpoint",
        s(&fx.checkpoint),
        "--corpus",
        s(&fx.corpus),
        "--calibration",
        s(&cal),
        "--neurons",
        "1,7",
        "--out",
        s(&out),
    ]);
    let v = json(&out.join("validate.json"));
    assert_eq!(v["mode"], "corpus");
    assert_eq!(v["neurons"].as_array().unwrap().len(), 2);
    assert!(v["neurons"][0]["fit"]["fvu"].is_number());

    ok(&[
        "validate",
        "--mode",
        "series",
        "--stride",
        "32",
        "--csv",
        "--checkpoint",
        s(&fx.checkpoint),
        "--corpus",
        s(&fx.corpus),
        "--calibration",
        s(&cal),
        "--neurons",
        "7",
        "--max-texts",
        "2",
        "--out",
        s(&out),
    ]);
    let v = json(&out.join("validate.json"));
    assert_eq!(v["texts"], 2);
    let series = std::fs::read_to_string(out.join("series.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 2 * 7);
}

#[test]
fn kernels_tv_and_denoms() {
    let fx = medium_fixture();
    let out = fx.dir.path().join("run");
    let ck = s(&fx.checkpoint);
    ok(&[
        "kernels",
        "--checkpoint",
        ck,
        "--anchor-token",
        "5",
        "--anchor-pos",
        "200",
        "--weights",
        "--out",
        s(&out),
    ]);
    let k = json(&out.join("kernels.json"));
    assert_eq!(k["heads"].as_array().unwrap().len(), 12);
    assert_eq!(k["heads"][0]["weights"].as_array().unwrap().len(), 201);

    ok(&[
        "tv",
        "--checkpoint",
        ck,
        "--corpus",
        s(&fx.corpus),
        "--heads",
        "0,1",
        "--out",
        s(&out),
    ]);
    let tv = json(&out.join("tv.json"));
    let med = tv["heads"][0]["median_tv"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&med));

    ok(&[
        "denoms",
        "--checkpoint",
        ck,
        "--corpus",
        s(&fx.corpus),
        "--heads",
        "0",
        "--anchor-token",
        "5",
        "--stride",
        "64",
        "--out",
        s(&out),
    ]);
    let d = json(&out.join("denoms.json"));
    assert_eq!(d["positions"], serde_json::json!([64, 128, 192]));
    let h = d["heads"][0]["concentration"]["hoeffding"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&h));
}

#[test]
fn anchor_token_text_needs_vocab() {
    let fx = medium_fixture();
    let out = fx.dir.path().join("run");
    let res = run(&["kernels", "--checkpoint", s(&fx.checkpoint), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    let res = run(&[
        "kernels",
        "--checkpoint",
        s(&fx.checkpoint),
        "--vocab",
        s(&common::vocab_path()),
        "--out",
        s(&out),
    ]);
    // " the" is id 262, outside the toy's 97-token vocabulary.
    assert_eq!(error_record(&res)["error"], "IdOutOfRange");
}
