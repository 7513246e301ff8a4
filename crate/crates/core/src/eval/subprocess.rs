//! Line-delimited subprocess evaluator transport.
//!
//! One child process per evaluation. The host writes a single request line
//! (canonical JSON) to the child's stdin and closes it. The child's reply is
//! the last non-empty line on stdout, a JSON object
//! `{"score": number, "side_info": {name: value, ...}}`; unknown fields are
//! ignored. Everything the child wrote to stdout before the reply line is
//! non-protocol output and is surfaced verbatim for stdio capture.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{SideInfo, SideInfoValue, SCHEMA_VERSION};

use super::{EvalFailure, Evaluation, EvaluationRequest, Evaluator, EvaluatorIdentity};

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ProtocolExample {
    pub id: String,
    pub payload: serde_json::Value,
}

/// The request line written to the child.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ProtocolRequest {
    pub schema_version: u32,
    pub candidate: String,
    pub example: Option<ProtocolExample>,
}

impl ProtocolRequest {
    pub fn from_request(req: &EvaluationRequest) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            candidate: req.candidate_text.clone(),
            example: req.example.as_ref().map(|e| ProtocolExample {
                id: e.id.clone(),
                payload: e.payload.clone(),
            }),
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("request serializes");
        line.push('\n');
        line
    }
}

/// Parsed reply line.
#[derive(Debug, PartialEq)]
pub struct ProtocolReply {
    pub score: f64,
    pub side_info: SideInfo,
}

impl ProtocolReply {
    pub fn parse(line: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("reply is not JSON: {e}"))?;
        let obj = value
            .as_object()
            .ok_or_else(|| "reply is not a JSON object".to_string())?;
        let score = obj
            .get("score")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| "reply lacks a numeric \"score\"".to_string())?;
        let mut side_info = SideInfo::new();
        match obj.get("side_info") {
            None | Some(serde_json::Value::Null) => {}
            Some(serde_json::Value::Object(entries)) => {
                for (name, v) in entries {
                    side_info
                        .insert(name.clone(), SideInfoValue::from_loose_json(v.clone()))
                        .map_err(|e| e.to_string())?;
                }
            }
            Some(_) => return Err("\"side_info\" must be an object".to_string()),
        }
        Ok(Self { score, side_info })
    }
}

/// Splits child stdout into (pre-reply bytes, reply line).
pub fn split_reply(stdout: &[u8]) -> (&[u8], Option<&str>) {
    let mut end = stdout.len();
    while end > 0 && matches!(stdout[end - 1], b'\n' | b'\r' | b' ' | b'\t') {
        end -= 1;
    }
    if end == 0 {
        return (stdout, None);
    }
    let start = stdout[..end].iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    match std::str::from_utf8(&stdout[start..end]) {
        Ok(line) => (&stdout[..start], Some(line)),
        Err(_) => (stdout, None),
    }
}

#[derive(Debug, Clone)]
pub struct SubprocessEvaluator {
    program: PathBuf,
    args: Vec<String>,
    identity: EvaluatorIdentity,
}

impl SubprocessEvaluator {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, identity: EvaluatorIdentity) -> Self {
        Self {
            program: program.into(),
            args,
            identity,
        }
    }

    pub fn program(&self) -> &Path {
        &self.program
    }
}

fn drain<R: Read + Send + 'static>(mut r: R) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        buf
    })
}

fn wait_with_deadline(child: &mut std::process::Child, timeout: Duration) -> std::io::Result<Option<ExitStatus>> {
    let deadline = Instant::now() + timeout;
    let mut pause = Duration::from_micros(200);
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Some(status));
        }
        let now = Instant::now();
        if now >= deadline {
            child.kill()?;
            child.wait()?;
            return Ok(None);
        }
        thread::sleep(pause.min(deadline - now));
        pause = (pause * 2).min(Duration::from_millis(20));
    }
}

impl Evaluator for SubprocessEvaluator {
    fn identity(&self) -> EvaluatorIdentity {
        self.identity.clone()
    }

    fn enforces_timeout(&self) -> bool {
        true
    }

    fn evaluate(&self, req: &EvaluationRequest) -> Result<Evaluation, EvalFailure> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| EvalFailure::fatal(format!("cannot spawn {}: {e}", self.program.display())))?;
        let out = drain(child.stdout.take().expect("piped stdout"));
        let err = drain(child.stderr.take().expect("piped stderr"));
        let line = ProtocolRequest::from_request(req).to_line();
        if let Some(mut stdin) = child.stdin.take() {
            // A child that exits without reading closes the pipe; that is
            // reported through its exit status, not here.
            let _ = stdin.write_all(line.as_bytes());
        }
        let status = wait_with_deadline(&mut child, req.timeout)
            .map_err(|e| EvalFailure::fatal(format!("waiting on evaluator: {e}")))?;
        let Some(status) = status else {
            // A grandchild may still hold the pipes open, so the drain
            // threads are left to finish on their own.
            return Err(EvalFailure::new("timeout"));
        };
        let stdout = out.join().unwrap_or_default();
        let stderr = String::from_utf8_lossy(&err.join().unwrap_or_default()).into_owned();
        let (pre, reply) = split_reply(&stdout);
        let pre_text = String::from_utf8_lossy(pre).into_owned();

        let fail = |message: String| EvalFailure {
            message,
            stdout: pre_text.clone(),
            stderr: stderr.clone(),
            fatal: false,
        };
        if !status.success() {
            return Err(fail(format!("evaluator exited with {status}")));
        }
        let Some(reply) = reply else {
            return Err(fail("evaluator produced no reply line".to_string()));
        };
        let parsed = ProtocolReply::parse(reply).map_err(|e| fail(format!("protocol violation: {e}")))?;
        Ok(Evaluation {
            score: parsed.score,
            side_info: parsed.side_info,
            stdout: pre_text,
            stderr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_reply_keeps_pre_reply_bytes_verbatim() {
        let out = b"debug 1\n  spaced\r\n{\"score\": 1}\n";
        let (pre, reply) = split_reply(out);
        assert_eq!(pre, b"debug 1\n  spaced\r\n");
        assert_eq!(reply, Some("{\"score\": 1}"));
        assert_eq!(split_reply(b"\n\n").1, None);
        assert_eq!(split_reply(b"{\"score\":2}"), (&b""[..], Some("{\"score\":2}")));
    }

    #[test]
    fn reply_parsing() {
        let r = ProtocolReply::parse(r#"{"score": 0.5, "side_info": {"msg": "hi", "n": 2}, "extra": true}"#).unwrap();
        assert_eq!(r.score, 0.5);
        assert_eq!(r.side_info.get("msg"), Some(&SideInfoValue::Text("hi".into())));
        assert_eq!(r.side_info.get("n"), Some(&SideInfoValue::Number(2.0)));
        assert!(ProtocolReply::parse("{}").is_err());
        assert!(ProtocolReply::parse("[1]").is_err());
        assert!(ProtocolReply::parse(r#"{"score": "1"}"#).is_err());
        assert!(ProtocolReply::parse(r#"{"score": 1, "side_info": 3}"#).is_err());
    }

    #[test]
    fn request_line_is_single_line_json() {
        let req = EvaluationRequest {
            candidate_text: "a\nb".into(),
            example: None,
            capture_stdio: true,
            timeout: Duration::from_secs(1),
        };
        let line = ProtocolRequest::from_request(&req).to_line();
        assert_eq!(line.matches('\n').count(), 1);
        assert_eq!(
            line,
            "{\"schema_version\":1,\"candidate\":\"a\\nb\",\"example\":null}\n"
        );
    }
}
