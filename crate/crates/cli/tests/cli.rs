use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn finqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finqa")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = finqa(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn dataset() -> String {
    fixture("dataset.json").to_string_lossy().into_owned()
}

#[test]
fn gold_evaluation_report() {
    let report: serde_json::Value = serde_json::from_str(&ok(&["evaluate", "--dataset", &dataset()])).unwrap();
    assert_eq!(report["execution_accuracy"], 1.0);
    assert_eq!(report["evaluated"], 13);
    assert_eq!(report["config_echo"]["backend"], "gold");
    let csv = ok(&["evaluate", "--dataset", &dataset(), "--report", "csv", "--top-k-internal", "3"]);
    assert_eq!(csv.lines().count(), 1 + 1 + 7);
    assert!(csv.contains(r#""top_k_internal"":3"#));
}

#[test]
fn saved_report_converts_between_formats() {
    let dir = tempfile::tempdir().unwrap();
    let json_path = dir.path().join("r.json");
    let csv_path = dir.path().join("r.csv");
    ok(&["evaluate", "--dataset", &dataset(), "-o", json_path.to_str().unwrap()]);
    ok(&["report", json_path.to_str().unwrap(), "--report", "csv", "-o", csv_path.to_str().unwrap()]);
    let direct = ok(&["evaluate", "--dataset", &dataset(), "--report", "csv"]);
    assert_eq!(std::fs::read_to_string(csv_path).unwrap(), direct);
}

#[test]
fn execute_against_record_table() {
    let line = ok(&["execute", "add(2, 3), multiply(#0, const_100)"]);
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["value"], 500.0);
    let line = ok(&["execute", "table_average(revenue, none)", "--dataset", &dataset(), "--record", "average-revenue"]);
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["value"], 120.0);
    assert!(!finqa(&["execute", "divide(1, 0)"]).status.success());
}

#[test]
fn external_index_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("defs.femb");
    let defs = fixture("definitions.json");
    ok(&[
        "index-build",
        "--definitions",
        defs.to_str().unwrap(),
        "--dataset",
        &dataset(),
        "-o",
        emb.to_str().unwrap(),
    ]);
    let lines = ok(&[
        "retrieve",
        "--dataset",
        &dataset(),
        "--definitions",
        defs.to_str().unwrap(),
        "--embeddings",
        emb.to_str().unwrap(),
    ]);
    let rows: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 13);
    for r in &rows {
        assert_eq!(r["external"].as_array().unwrap().len(), 3);
        assert!(r["failure"].is_null());
        assert!(r["internal"].as_array().unwrap().len() <= 5);
    }
}

#[test]
fn ingest_and_linearize() {
    let summary: serde_json::Value = serde_json::from_str(&ok(&["ingest", "--dataset", &dataset()])).unwrap();
    assert_eq!(summary["records"], 13);
    assert_eq!(summary["failures"][0]["id"], "broken-program");
    let lines = ok(&["linearize", "--dataset", &dataset(), "--record", "debt-after-2012"]);
    let v: serde_json::Value = serde_json::from_str(lines.trim()).unwrap();
    assert_eq!(v["sentences"].as_array().unwrap().len(), 3);
}

#[test]
fn decoder_checkpoint_feeds_the_decoder_backend() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("d.ckpt");
    let loss = dir.path().join("loss.csv");
    ok(&[
        "train-decoder",
        "--synthetic",
        "8",
        "--epochs",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--loss-csv",
        loss.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read_to_string(&loss).unwrap().lines().count(), 1 + 3);
    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "evaluate",
        "--dataset",
        &dataset(),
        "--backend",
        "decoder",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(report["evaluated"], 13);
    assert!(report["program_accuracy"].is_number());
}

#[test]
fn usage_errors_fail() {
    assert!(!finqa(&["evaluate"]).status.success());
    assert!(!finqa(&["evaluate", "--dataset", &dataset(), "--backend", "oracle"]).status.success());
    assert!(!finqa(&["evaluate", "--dataset", &dataset(), "--backend", "endpoint"]).status.success());
}
