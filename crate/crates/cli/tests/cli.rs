//! Command-line behaviour: configuration resolution, generation and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use seqsel::dataset::{load_dataset, SplitSpec};
use serde_json::Value;

fn seqsel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqsel"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

const TINY: &[&str] = &[
    "--set",
    "data.n_candidates=24",
    "--set",
    "data.n_queries=40",
    "--set",
    "data.eval_queries=10",
    "--set",
    "train.epochs=2",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn dry_run_prints_the_resolved_config_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"train.epochs": 4, "search.beam_width": 3}"#,
    )
    .unwrap();
    let out = seqsel(
        dir.path(),
        &["--config", "run.json", "--set", "train.epochs=6", "train", "--lr", "0.5", "--dry-run"],
    );
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["train.epochs"], 6);
    assert_eq!(v["search.beam_width"], 3);
    assert_eq!(v["train.learning_rate"], 0.5);
    assert!(v.get("seed").is_some());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_keys_and_bad_usage_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(seqsel(dir.path(), &["--set", "train.nope=1", "gen"]).status.code(), Some(1));
    assert_eq!(seqsel(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(seqsel(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--seed", "7", "gen", "--n-candidates", "200", "--n-queries", "500"];
    for out in ["a.jsonl", "b.jsonl"] {
        let mut a = args.to_vec();
        a.extend(["--out", out]);
        assert_eq!(seqsel(dir.path(), &a).status.code(), Some(0));
    }
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 700);
    assert_eq!(a, b);
    let other = seqsel(dir.path(), &["--seed", "8", "gen", "--n-candidates", "200", "--n-queries", "500", "--out", "c.jsonl"]);
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(a, std::fs::read(dir.path().join("c.jsonl")).unwrap());
}

#[test]
fn gen_rejects_more_skills_per_item_than_skills_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqsel(
        dir.path(),
        &["gen", "--skill-count", "4", "--skills-per-item", "5", "--out", "x.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn generated_file_round_trips_through_load_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqsel(dir.path(), &["gen", "--n-candidates", "50", "--n-queries", "30", "--set", "data.eval_queries=10", "--out", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(0));
    let data = load_dataset(
        &dir.path().join("d.jsonl"),
        SplitSpec {
            query_count: 30,
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(data.task_name, "d");
    assert_eq!(data.candidates.len(), 50);
    assert_eq!(data.queries.len(), 30);
    assert!(data.queries.iter().all(|q| q.label.is_some() && !q.skills.is_empty()));
    assert!(dir.path().join("d.jsonl.task.json").exists());
}

#[test]
fn infer_without_a_checkpoint_exits_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(seqsel(dir.path(), &with_tiny(&["gen"])).status.code(), Some(0));
    let out = seqsel(dir.path(), &with_tiny(&["infer"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn train_index_infer_write_reports_with_config_and_checkpoint_hash() {
    let dir = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 4] = [&["gen"], &["train"], &["index"], &["infer", "--trace", "run/trace.jsonl"]];
    for args in steps {
        let out = seqsel(dir.path(), &with_tiny(args));
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |name: &str| -> Value {
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/reports").join(name)).unwrap()).unwrap()
    };
    let (train, infer) = (read("train.json"), read("infer.json"));
    assert_eq!(train["checkpoint"], infer["checkpoint"]);
    assert_eq!(train["checkpoint"].as_str().unwrap().len(), 64);
    assert_eq!(infer["config"]["data.eval_queries"], 10);
    assert_eq!(infer["per_query"].as_array().unwrap().len(), 10);
    let trace = std::fs::read_to_string(dir.path().join("run/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 10);
}
