use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use textopt::eval::{EvaluationCache, EvaluationHost, HostConfig, HostError, SubprocessEvaluator, Target};
use textopt::model::{Budget, Candidate, CandidateId, Example, Origin, SideInfoValue, ERROR_KEY};

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn host_for(program: PathBuf, config: HostConfig) -> EvaluationHost {
    let evaluator = SubprocessEvaluator::new(
        program,
        Vec::new(),
        textopt::eval::EvaluatorIdentity::new("sh-test", "1"),
    );
    EvaluationHost::new(Arc::new(evaluator), EvaluationCache::in_memory(), config)
}

fn seed(text: &str) -> Candidate {
    Candidate::root(CandidateId(0), text, Origin::Seed)
}

fn text_of<'a>(si: &'a textopt::model::SideInfo, key: &str) -> Option<&'a str> {
    match si.get(key) {
        Some(SideInfoValue::Text(t)) => Some(t),
        _ => None,
    }
}

#[test]
fn reply_line_becomes_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(
        dir.path(),
        "good.sh",
        r#"read -r line
echo "chatter before the reply"
echo '{"score": 0.75, "side_info": {"note": "fine", "parts": {"a": 1, "b": 0.5}}}'"#,
    );
    let host = host_for(prog, HostConfig::default());
    let rec = host.evaluate(&seed("x"), &Target::scalar()).unwrap();
    assert_eq!(rec.score.value(), 0.75);
    assert_eq!(rec.evaluator_calls, 1);
    assert!(!rec.from_cache);
    assert_eq!(text_of(&rec.side_info, "note"), Some("fine"));
    assert_eq!(rec.side_info.sub_scores().count(), 2);
    // Stdio stays out of side info unless capture is on.
    assert!(rec.side_info.get("stdout").is_none());

    let again = host.evaluate(&seed("x"), &Target::scalar()).unwrap();
    assert!(again.from_cache);
    assert_eq!(host.invocations(), 1);
}

#[test]
fn request_carries_candidate_and_example() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(
        dir.path(),
        "echo.sh",
        r#"read -r line
printf '%s\n' "$line" >&2
echo '{"score": 1}'"#,
    );
    let config = HostConfig {
        capture_stdio: true,
        ..HostConfig::default()
    };
    let host = host_for(prog, config);
    let ex = Example::train("ex-1", serde_json::json!({"q": "two\nlines"}));
    let rec = host.evaluate(&seed("cand\ttext"), &Target::example(&ex)).unwrap();
    let line = text_of(&rec.side_info, "stderr").unwrap();
    let sent: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(sent["schema_version"], 1);
    assert_eq!(sent["candidate"], "cand\ttext");
    assert_eq!(sent["example"]["id"], "ex-1");
    assert_eq!(sent["example"]["payload"]["q"], "two\nlines");
}

#[test]
fn captured_stdout_is_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(
        dir.path(),
        "noisy.sh",
        r#"read -r line
printf '  indented\n\ttabbed\n'
echo '{"score": 2}'"#,
    );
    let config = HostConfig {
        capture_stdio: true,
        ..HostConfig::default()
    };
    let rec = host_for(prog, config).evaluate(&seed("x"), &Target::scalar()).unwrap();
    assert_eq!(text_of(&rec.side_info, "stdout"), Some("  indented\n\ttabbed\n"));
    assert!(rec.side_info.get("stderr").is_none());
}

#[test]
fn failures_are_floored_and_charged() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("exit.sh", "read -r line\necho '{\"score\": 5}'\nexit 3", "exited"),
        ("slow.sh", "read -r line\nsleep 5\necho '{\"score\": 5}'", "timeout"),
        ("garbage.sh", "read -r line\necho 'not json'", "protocol"),
        ("silent.sh", "read line", "no reply"),
        ("nan.sh", "read -r line\necho '{\"score\": \"NaN\"}'", "protocol"),
    ];
    for (name, body, needle) in cases {
        let prog = script(dir.path(), name, body);
        let config = HostConfig {
            timeout_ms: 300,
            failure_floor: Some(-1.0),
            ..HostConfig::default()
        };
        let host = host_for(prog, config);
        let mut budget = Budget::new(5);
        let recs = host
            .evaluate_full(&seed("x"), &[Target::scalar()], &mut budget)
            .unwrap();
        let rec = &recs[0];
        assert_eq!(rec.score.value(), -1.0, "{name}");
        assert!(rec.side_info.is_failure(), "{name}");
        let msg = text_of(&rec.side_info, ERROR_KEY).unwrap();
        assert!(msg.contains(needle), "{name}: {msg}");
        assert_eq!(budget.consumed, 1, "{name}");
    }
}

#[test]
fn unfloored_failure_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(dir.path(), "exit.sh", "read -r line\nexit 1");
    let config = HostConfig {
        failure_floor: None,
        ..HostConfig::default()
    };
    let err = host_for(prog, config)
        .evaluate(&seed("x"), &Target::scalar())
        .unwrap_err();
    assert!(matches!(err, HostError::Unfloored(_)));
}

#[test]
fn spawn_failure_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let host = host_for(dir.path().join("missing"), HostConfig::default());
    let err = host.evaluate(&seed("x"), &Target::scalar()).unwrap_err();
    assert!(matches!(err, HostError::Evaluator(_)));

    // Present but not executable.
    let path = dir.path().join("plain.sh");
    std::fs::write(&path, "#!/bin/sh\necho '{\"score\": 1}'\n").unwrap();
    let host = host_for(path, HostConfig::default());
    assert!(matches!(
        host.evaluate(&seed("x"), &Target::scalar()),
        Err(HostError::Evaluator(_))
    ));
}

#[test]
fn child_that_ignores_stdin_still_replies() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(dir.path(), "deaf.sh", "echo '{\"score\": 0.25}'");
    let big = "y".repeat(1 << 20);
    let rec = host_for(prog, HostConfig::default())
        .evaluate(&seed(&big), &Target::scalar())
        .unwrap();
    assert_eq!(rec.score.value(), 0.25);
}

#[test]
fn parallel_dispatch_keeps_target_order() {
    let dir = tempfile::tempdir().unwrap();
    // Score is the length of the request line, which differs per example.
    let prog = script(
        dir.path(),
        "len.sh",
        r#"read -r line
echo "{\"score\": ${#line}}""#,
    );
    let examples: Vec<Example> = (0..6)
        .map(|i| Example::train(format!("e{i}"), serde_json::json!("p".repeat(i * 3))))
        .collect();
    let targets: Vec<Target> = examples.iter().map(Target::example).collect();
    let serial = host_for(prog.clone(), HostConfig::default());
    let parallel = host_for(
        prog,
        HostConfig {
            parallelism: 3,
            ..HostConfig::default()
        },
    );
    let mut b1 = Budget::new(10);
    let mut b2 = Budget::new(10);
    let a = serial.evaluate_full(&seed("c"), &targets, &mut b1).unwrap();
    let b = parallel.evaluate_full(&seed("c"), &targets, &mut b2).unwrap();
    let scores = |rs: &[textopt::model::EvaluationRecord]| rs.iter().map(|r| r.score.value()).collect::<Vec<_>>();
    assert_eq!(scores(&a), scores(&b));
    assert!(scores(&a).windows(2).all(|w| w[0] < w[1]));
    assert_eq!(b2.consumed, 6);
}
