use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_subtoken-merge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flops_prints_the_hand_sum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.json");
    std::fs::write(
        &cfg,
        r#"{"arch": "encoder_only", "layers": 1, "d_model": 4, "heads": 1, "d_ff": 8,
            "vocab_size": 8, "max_len": 8, "num_classes": 2}"#,
    )
    .unwrap();
    let out = cli(&["flops", "--config", path(&cfg), "--n", "2", "--nprime", "2", "--position", "none"]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["total"], 576);
    assert_eq!(json["totals"]["qkv_proj"], 192);

    let out = cli(&["flops", "--config", path(&cfg), "--n", "6", "--nprime", "3", "--position", "0"]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["merge"], 2 * 6 * 4);
}

#[test]
fn pareto_reads_points_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("points.csv");
    std::fs::write(&input, "label,cost,performance\nnone,15.92,93.86\nmean,13.53,91.69\nlearnable,13.53,92.04\n")
        .unwrap();
    let out = dir.path().join("frontier.json");
    cli(&["pareto", "--in", path(&input), "--out", path(&out)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let labels: Vec<&str> = json["frontier"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["learnable", "none"]);
    assert_eq!(json["knee"]["label"], "none");
}

#[test]
fn tokenize_stats_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stats.json");
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/identifier_corpus.jsonl");
    cli(&["tokenize-stats", "--corpus", path(&corpus), "--vocab-size", "150", "--out", path(&out)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(json["mean_ratio"].as_f64().unwrap() > 1.0);
    assert_eq!(json["pairs"].as_array().unwrap().len(), 300);
}

#[test]
fn train_and_sweep_run_from_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{
            "task": "classify",
            "model": {"layers": 1, "d_model": 8, "heads": 2, "d_ff": 16, "max_len": 160},
            "strategies": ["mean"],
            "positions": [1],
            "seeds": [1],
            "epochs": 1,
            "vocab_size": 100,
            "data": {"kind": "synthetic_classification", "num_classes": 2, "per_class": 10, "seed": 3}
        }"#,
    )
    .unwrap();
    let ckpt = dir.path().join("model.json");
    let out = cli(&[
        "train", "--config", path(&cfg), "--seed", "1", "--strategy", "learnable", "--position", "0",
        "--checkpoint", path(&ckpt),
    ]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["label"], "learnable@0");
    assert_eq!(json["curve"].as_array().unwrap().len(), 2);
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(saved["format"], "subtoken-merge-checkpoint");
    assert!(saved["tensors"]["merge_w"].is_object());

    let sweep = dir.path().join("sweep");
    cli(&["sweep", "--config", path(&cfg), "--out", path(&sweep)]);
    let csv = std::fs::read_to_string(sweep.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("strategy,position,seed,metric,flops\n"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_subtoken-merge"))
        .args(["train", "--config", "/nonexistent.json", "--seed", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
}
