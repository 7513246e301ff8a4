mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use common::*;
use textopt::bench::make_multitask_suite;
use textopt::eval::EvaluationCache;
use textopt::persist::{self, PersistError, RunCheckpoint};

fn checkpoint_after(iterations: usize) -> RunCheckpoint {
    let mut engine = multitask_engine(make_multitask_suite(4, 2), 200, 2, EvaluationCache::in_memory());
    for _ in 0..iterations {
        engine.step().unwrap();
    }
    engine.checkpoint()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let ck = checkpoint_after(15);
    persist::save_checkpoint(&ck, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = persist::load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ck);
    persist::save_checkpoint(&loaded, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    // No temp files left behind.
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn truncated_checkpoint_is_corrupt() {
    let bytes = checkpoint_after(5).to_bytes();
    for cut in [0, 1, bytes.len() / 2, bytes.len() - 3] {
        assert!(matches!(
            RunCheckpoint::from_bytes(&bytes[..cut]),
            Err(PersistError::Corrupt(_))
        ));
    }
}

#[test]
fn newer_schema_is_a_migration_error() {
    let mut value: serde_json::Value = serde_json::from_slice(&checkpoint_after(3).to_bytes()).unwrap();
    value["schema_version"] = serde_json::json!(2);
    let bytes = serde_json::to_vec(&value).unwrap();
    assert!(matches!(
        RunCheckpoint::from_bytes(&bytes),
        Err(PersistError::Migration { found: 2, supported: 1 })
    ));
}

#[test]
fn foreign_prompt_template_is_rejected() {
    let mut value: serde_json::Value = serde_json::from_slice(&checkpoint_after(3).to_bytes()).unwrap();
    value["template_id"] = serde_json::json!("someone-else/9");
    let bytes = serde_json::to_vec(&value).unwrap();
    assert!(matches!(
        RunCheckpoint::from_bytes(&bytes),
        Err(PersistError::TemplateMismatch { .. })
    ));
}

#[test]
fn invariant_violations_are_corrupt() {
    let good = checkpoint_after(8);
    let mut bad = good.clone();
    bad.budget.consumed += 1;
    assert!(matches!(
        RunCheckpoint::from_bytes(&bad.to_bytes()),
        Err(PersistError::Corrupt(_))
    ));

    let mut bad = good.clone();
    bad.candidates[0].parent_id = Some(textopt::model::CandidateId(3));
    assert!(matches!(
        RunCheckpoint::from_bytes(&bad.to_bytes()),
        Err(PersistError::Corrupt(_))
    ));

    let mut bad = good.clone();
    bad.records.swap(0, 1);
    assert!(matches!(
        RunCheckpoint::from_bytes(&bad.to_bytes()),
        Err(PersistError::Corrupt(_))
    ));

    // A frontier entry pointing past the candidate store.
    let mut value: serde_json::Value = serde_json::from_slice(&good.to_bytes()).unwrap();
    let scores = value["pareto"]["scores"].as_object_mut().unwrap();
    let row = scores.values().next().unwrap().clone();
    scores.insert("999".into(), row);
    let bytes = serde_json::to_vec(&value).unwrap();
    assert!(matches!(
        RunCheckpoint::from_bytes(&bytes),
        Err(PersistError::Corrupt(_))
    ));
}

fn write_config(dir: &Path, budget: u64, extra_evaluator: Option<&str>) -> PathBuf {
    let evaluator = extra_evaluator.map(str::to_string).unwrap_or_else(|| {
        format!(r#"{{"kind": "string_task", "task": {{"target": "{TARGET_12}", "scorer": {{"kind": "prefix_match_len"}}}}}}"#)
    });
    let text = format!(
        r#"{{
  "seed_candidate": "",
  "evaluator": {evaluator},
  "objective": "spell the target word",
  "config": {{
    "max_evaluator_calls": {budget},
    "max_iterations": 40,
    "rng_seed": 5,
    "proposer": {{"kind": "mismatch_fixer"}},
    "output_dir": "out"
  }}
}}"#
    );
    let path = dir.join("run.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn textopt(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_textopt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 60, None);
    let (code, stdout, stderr) = textopt(
        &["run", config.to_str().unwrap(), "--plot-data", "plot.csv"],
        dir.path(),
    );
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("best score: 1"));
    let out = dir.path().join("out");
    for f in ["result.json", "trajectory.jsonl", "frontier.tsv", "checkpoint.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let plot = std::fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    let rows: Vec<f64> = plot
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 40);
    assert!(rows.windows(2).all(|w| w[0] <= w[1]));
    let trajectory = std::fs::read_to_string(out.join("trajectory.jsonl")).unwrap();
    assert_eq!(trajectory.lines().count(), 40);

    let (code, stdout, _) = textopt(&["inspect-frontier", "out/checkpoint.json"], dir.path());
    assert_eq!(code, 0);
    assert!(stdout.starts_with("candidate_id\tscalar\tweight\tnondominated\n"));

    let (code, stdout, _) = textopt(&["validate-config", config.to_str().unwrap()], dir.path());
    assert_eq!(code, 0);
    assert!(stdout.contains("config ok"));
}

#[test]
fn cli_zero_budget_returns_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 60, None);
    let (code, stdout, stderr) = textopt(&["run", config.to_str().unwrap(), "--budget", "0"], dir.path());
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("unevaluated"));
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/result.json")).unwrap()).unwrap();
    assert_eq!(result["best"]["single"]["id"], 0);
    assert_eq!(result["best"]["single"]["text"], "");
    assert_eq!(result["budget"]["consumed"], 0);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(
        dir.path(),
        10,
        Some(r#"{"kind": "subprocess", "program": "./no/such/evaluator", "name": "x"}"#),
    );
    let (code, _, stderr) = textopt(&["run", missing.to_str().unwrap()], dir.path());
    assert_eq!(code, 3, "{stderr}");
    let (code, _, _) = textopt(&["validate-config", missing.to_str().unwrap()], dir.path());
    assert_eq!(code, 3);

    std::fs::write(dir.path().join("bad.json"), r#"{"evaluator": 5}"#).unwrap();
    let (code, _, stderr) = textopt(&["run", "bad.json"], dir.path());
    assert_eq!(code, 2);
    assert!(stderr.contains("invalid configuration"));
    let (code, _, _) = textopt(&["run", "does-not-exist.json"], dir.path());
    assert_eq!(code, 2);
    let (code, _, _) = textopt(&["run"], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn cli_resume_matches_uninterrupted_run() {
    let split = tempfile::tempdir().unwrap();
    let config = write_config(split.path(), 8, None);
    let config = config.to_str().unwrap();
    assert_eq!(textopt(&["run", config], split.path()).0, 0);
    let (code, _, stderr) = textopt(
        &["resume", "out/checkpoint.json", "--config", config, "--budget", "30"],
        split.path(),
    );
    assert_eq!(code, 0, "{stderr}");
    let resumed = std::fs::read(split.path().join("out/result.json")).unwrap();

    let whole = tempfile::tempdir().unwrap();
    let config = write_config(whole.path(), 30, None);
    assert_eq!(textopt(&["run", config.to_str().unwrap()], whole.path()).0, 0);
    let uninterrupted = std::fs::read(whole.path().join("out/result.json")).unwrap();
    assert_eq!(resumed, uninterrupted);
    // The appended trajectory also matches.
    assert_eq!(
        std::fs::read(split.path().join("out/trajectory.jsonl")).unwrap(),
        std::fs::read(whole.path().join("out/trajectory.jsonl")).unwrap()
    );
}

#[test]
fn cli_records_and_replays_proposer_traffic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 20, None);
    let config_s = config.to_str().unwrap();
    let (code, _, stderr) = textopt(&["run", config_s, "--record-proposer", "log.jsonl"], dir.path());
    assert_eq!(code, 0, "{stderr}");
    let first = std::fs::read(dir.path().join("out/result.json")).unwrap();
    let (code, stdout, _) = textopt(&["replay-proposer", "log.jsonl"], dir.path());
    assert_eq!(code, 0);
    assert!(stdout.starts_with("40 exchanges, 0 failed"));

    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace(
            r#"{"kind": "mismatch_fixer"}"#,
            r#"{"kind": "replay", "path": "log.jsonl"}"#,
        )
        .replace(r#""output_dir": "out""#, r#""output_dir": "replayed""#);
    std::fs::write(&config, text).unwrap();
    let (code, _, stderr) = textopt(&["run", config_s], dir.path());
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(std::fs::read(dir.path().join("replayed/result.json")).unwrap(), first);
}

#[test]
fn sample_configs_validate() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let (code, stdout, stderr) = textopt(&["validate-config", path.to_str().unwrap()], &configs);
            assert_eq!(code, 0, "{}: {stderr}", path.display());
            assert!(stdout.starts_with("config ok"));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

#[test]
fn sample_subprocess_evaluator_scores_the_seed() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let out = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_textopt"))
        .args(["run", "length.json", "--budget", "1", "--output-dir"])
        .arg(out.path())
        .current_dir(&configs)
        .env("TEXTOPT_API_KEY", "unused")
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&output.stdout).trim(), "best score: 0.25");
}
