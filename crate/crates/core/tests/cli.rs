use std::path::Path;
use std::process::{Command, Output};

use kqkit::kd::experiment::ExperimentResult;
use kqkit::{write_dump, LayerManifest, LayerMetrics, ManifestEntry, RepresentationSet};

fn kqkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kqkit"))
        .args(args)
        .env("KQKIT_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Three layers over the same 30 labelled samples.
fn write_manifest(dir: &Path, sizes: [usize; 3]) -> std::path::PathBuf {
    let entries = (1..=3u32)
        .zip(sizes)
        .map(|(layer, n)| {
            let labels: Vec<u32> = (0..n as u32).map(|i| i % 3).collect();
            let data: Vec<f32> = (0..n * 4)
                .map(|k| {
                    let (row, col) = (k / 4, k % 4);
                    let class = (row % 3) as f32;
                    (if col == row % 3 { 2.0 + class } else { 0.0 })
                        + 0.1 * ((k * 7 % 11) as f32) * layer as f32
                })
                .collect();
            let set = RepresentationSet::new(layer, 4, 3, labels, data).unwrap();
            let file = format!("l{layer}.rdmp");
            write_dump(&set, dir.join(&file)).unwrap();
            ManifestEntry {
                layer,
                file,
                stage: Some(layer),
                desc: None,
            }
        })
        .collect();
    let path = dir.join("manifest.json");
    LayerManifest::new(entries, dir).save(&path).unwrap();
    path
}

#[test]
fn analyze_writes_metrics_table_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), [30, 30, 30]);
    let out = dir.path().join("out");
    ok(&kqkit(&[
        "analyze",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]));

    let metrics: Vec<LayerMetrics> =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.len(), 3);
    assert_eq!(
        metrics.iter().map(|m| m.layer).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().next().unwrap().starts_with("layer,"));

    let svg = std::fs::read_to_string(out.join("metrics.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);

    let report = read_json(&out.join("analyze.report.json"));
    assert_eq!(report["command"], "analyze");
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert!(report["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn analyze_rejects_inconsistent_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), [30, 27, 30]);
    let out = kqkit(&[
        "analyze",
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("layer 2") && err.contains("sample count mismatch"),
        "{err}"
    );
}

#[test]
fn synth_analyze_select_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace");
    ok(&kqkit(&[
        "synth",
        "--out",
        s(&trace),
        "--stages",
        "1,1,2,2,3,3",
    ]));
    let manifest = trace.join("manifest.json");
    let out = dir.path().join("analysis");
    ok(&kqkit(&[
        "analyze",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]));

    let metrics = out.join("metrics.json");
    let res = kqkit(&["select", "--metrics", s(&metrics), "--k", "2"]);
    ok(&res);
    assert!(String::from_utf8_lossy(&res.stdout).contains("selected: [4, 5]"));
    let sel = read_json(&out.join("selection.json"));
    assert_eq!(sel["selected"], serde_json::json!([4, 5]));

    let stage_out = dir.path().join("stage.json");
    ok(&kqkit(&[
        "select",
        "--method",
        "stage_end",
        "--manifest",
        s(&manifest),
        "--k",
        "2",
        "--out",
        s(&stage_out),
    ]));
    assert_eq!(read_json(&stage_out)["selected"], serde_json::json!([2, 4]));

    let manual_out = dir.path().join("manual.json");
    ok(&kqkit(&[
        "select",
        "--method",
        "manual",
        "--layers",
        "3,1",
        "--out",
        s(&manual_out),
    ]));
    assert_eq!(
        read_json(&manual_out)["selected"],
        serde_json::json!([1, 3])
    );

    let bad = kqkit(&["select", "--metrics", s(&metrics), "--k", "9"]);
    assert!(!bad.status.success());
}

const CONFIG: &str = r#"{
  "seeds": [0, 1],
  "dataset": {"kind": "blobs", "classes": 3, "dim": 6, "samples": 240, "cluster_std": 0.8, "seed": 1},
  "teacher": {"kind": "mlp", "hidden": [16, 16, 16], "epochs": 8},
  "student": {"hidden": [8, 8], "layers": [1, 2]},
  "cells": [
    {"name": "ce_only", "recipe": "ce_only"},
    {"name": "base_fkd", "recipe": "base_fkd"},
    {"name": "ours", "recipe": "ours"}
  ],
  "reference": "base_fkd",
  "baseline": "ce_only",
  "epochs": 4,
  "batch_size": 32
}"#;

#[test]
fn distill_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("run");
    let res = kqkit(&["distill", "--config", s(&cfg), "--out", s(&out)]);
    ok(&res);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("ours") && stdout.contains("ce_only"));

    let results: ExperimentResult =
        serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    let runs: usize = results.cells.iter().map(|c| c.runs.len()).sum();
    assert_eq!(runs, 6);
    assert_eq!(results.ari.len(), 1);
    assert_eq!(results.ari[0].cell, "ours");
    assert_eq!(results.teachers.len(), 2);
    let report = read_json(&out.join("distill.report.json"));
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["config_hash"], results.config_hash);

    let rep = dir.path().join("report");
    ok(&kqkit(&[
        "report",
        "--results",
        s(&out.join("results.json")),
        "--out",
        s(&rep),
    ]));
    let md = std::fs::read_to_string(rep.join("report.md")).unwrap();
    assert_eq!(md.matches("| ours |").count(), 2);
    let svg = std::fs::read_to_string(rep.join("accuracy.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 3);
}

#[test]
fn report_marks_failed_cells_and_single_seed_sd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
seeds = [3]
epochs = 2
batch_size = 32

[dataset]
kind = "blobs"
classes = 2
dim = 3
samples = 100

[teacher]
kind = "mlp"
hidden = [8]
epochs = 2

[student]
hidden = [4]
layers = [1]

[[cells]]
name = "ce_only"
recipe = "ce_only"
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&kqkit(&["distill", "--config", s(&cfg), "--out", s(&out)]));

    let path = out.join("results.json");
    let mut results: serde_json::Value = read_json(&path);
    assert_eq!(results["cells"][0]["sd"], 0.0);
    let mut failed = results["cells"][0].clone();
    failed["name"] = "broken".into();
    failed["mean"] = serde_json::Value::Null;
    failed["sd"] = serde_json::Value::Null;
    failed["failed"] = true.into();
    results["cells"].as_array_mut().unwrap().push(failed);
    std::fs::write(&path, results.to_string()).unwrap();

    let rep = dir.path().join("rep");
    ok(&kqkit(&["report", "--results", s(&path), "--out", s(&rep)]));
    let md = std::fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(md.contains("± 0.00"));
    assert!(md
        .lines()
        .any(|l| l.starts_with("| broken |") && l.contains("—")));
    let svg = std::fs::read_to_string(rep.join("accuracy.svg")).unwrap();
    assert!(svg.contains(r#"class="missing""#));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seeds": [0], "unknown_field": 1}"#).unwrap();
    let out = kqkit(&["distill", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(
        kqkit(&["distill", "--config", s(&cfg)]).status.code(),
        Some(2)
    );

    assert_eq!(kqkit(&["analyze"]).status.code(), Some(2));
    let missing = kqkit(&[
        "analyze",
        "--manifest",
        "/nonexistent/m.json",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}
