//! Metric and error-statistics golden files: each fixture holds gold and
//! predicted JSONL plus hand-tallied expectations.

use std::path::{Path, PathBuf};

use xslu::corpus::{read_jsonl, Utterance};
use xslu::evalkit::{error_statistics, evaluate, join_predictions, ErrorStats};
use xslu::lajoint::PredictionLine;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn expected(name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(fixture(name).join("expected.json")).unwrap()).unwrap()
}

fn check_fixture(name: &str) {
    let dir = fixture(name);
    let gold: Vec<Utterance> = read_jsonl(&dir.join("gold.jsonl")).unwrap();
    let pred: Vec<PredictionLine> = read_jsonl(&dir.join("pred.jsonl")).unwrap();
    let records = join_predictions(&gold, &pred).unwrap();
    let want = expected(name);
    let metrics = serde_json::to_value(evaluate(&records)).unwrap();
    for (k, v) in want["metrics"].as_object().unwrap() {
        assert_eq!(&metrics[k], v, "{name}: metrics.{k}");
    }
    let errors = serde_json::to_value(error_statistics(&records)).unwrap();
    for (k, v) in want["errors"].as_object().unwrap() {
        assert_eq!(&errors[k], v, "{name}: errors.{k}");
    }
}

#[test]
fn worked_example() {
    check_fixture("worked");
    let dir = fixture("worked");
    let gold: Vec<Utterance> = read_jsonl(&dir.join("gold.jsonl")).unwrap();
    let pred: Vec<PredictionLine> = read_jsonl(&dir.join("pred.jsonl")).unwrap();
    let m = evaluate(&join_predictions(&gold, &pred).unwrap());
    assert_eq!(m.slot_f1, 2.0 / 3.0);
    assert_eq!((m.slot_precision, m.slot_recall), (0.5, 1.0));
}

#[test]
fn taxonomy_covers_every_category() {
    check_fixture("taxonomy");
}

#[test]
fn multispan_pairs_left_to_right() {
    check_fixture("multispan");
}

#[test]
fn error_stats_command_matches_golden_tallies() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["worked", "taxonomy", "multispan"] {
        let dir = fixture(name);
        let out = tmp.path().join(format!("{name}.json"));
        let code = xslu::cli::run([
            "xslu",
            "error-stats",
            "--pred",
            dir.join("pred.jsonl").to_str().unwrap(),
            "--gold",
            dir.join("gold.jsonl").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let got: ErrorStats = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        let got = serde_json::to_value(got).unwrap();
        for (k, v) in expected(name)["errors"].as_object().unwrap() {
            assert_eq!(&got[k], v, "{name}: {k}");
        }
        assert!(got["convention"].as_str().unwrap().contains("left-to-right"));
    }
}
