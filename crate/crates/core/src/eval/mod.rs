//! Evaluator execution: in-process callbacks or subprocesses, failure
//! flooring, stdio capture, timeouts, side-info size capping and the
//! content-addressed cache.

mod cache;
mod subprocess;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheKey, EvaluationCache};
pub use subprocess::{split_reply, ProtocolExample, ProtocolReply, ProtocolRequest, SubprocessEvaluator};

use crate::model::{
    Budget, Candidate, EvaluationRecord, Example, ObjectiveId, Score, SideInfo, SideInfoValue, ERROR_KEY,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_SIDE_INFO_CAP: usize = 256 * 1024;
pub const TRUNCATED_KEY: &str = "Truncated";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorIdentity {
    pub name: String,
    pub version: String,
}

impl EvaluatorIdentity {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRequest {
    pub candidate_text: String,
    pub example: Option<Example>,
    pub capture_stdio: bool,
    pub timeout: Duration,
}

/// A successful evaluator answer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub score: f64,
    pub side_info: SideInfo,
    pub stdout: String,
    pub stderr: String,
}

impl Evaluation {
    pub fn new(score: f64, side_info: SideInfo) -> Self {
        Self {
            score,
            side_info,
            ..Default::default()
        }
    }
}

/// A failed evaluation. Non-fatal failures are floored; fatal ones abort.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFailure {
    pub message: String,
    pub stdout: String,
    pub stderr: String,
    pub fatal: bool,
}

impl EvalFailure {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            ..Default::default()
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            fatal: true,
            ..Default::default()
        }
    }
}

pub trait Evaluator: Send + Sync {
    /// Name and version folded into every cache key.
    fn identity(&self) -> EvaluatorIdentity;

    fn evaluate(&self, request: &EvaluationRequest) -> Result<Evaluation, EvalFailure>;

    /// True when `evaluate` honours `request.timeout` itself.
    fn enforces_timeout(&self) -> bool {
        false
    }
}

/// Wraps a closure `(candidate, example) -> (score, side_info)`.
pub struct FnEvaluator<F> {
    identity: EvaluatorIdentity,
    f: F,
}

impl<F> FnEvaluator<F>
where
    F: Fn(&str, Option<&Example>) -> Result<(f64, SideInfo), String> + Send + Sync,
{
    pub fn new(identity: EvaluatorIdentity, f: F) -> Self {
        Self { identity, f }
    }
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&str, Option<&Example>) -> Result<(f64, SideInfo), String> + Send + Sync,
{
    fn identity(&self) -> EvaluatorIdentity {
        self.identity.clone()
    }

    fn evaluate(&self, request: &EvaluationRequest) -> Result<Evaluation, EvalFailure> {
        (self.f)(&request.candidate_text, request.example.as_ref())
            .map(|(score, side_info)| Evaluation::new(score, side_info))
            .map_err(EvalFailure::new)
    }
}

#[derive(Debug, Error)]
pub enum HostError {
    #[error("evaluation cache I/O failed: {0}")]
    Cache(#[from] std::io::Error),
    #[error("evaluator failed fatally: {0}")]
    Evaluator(String),
    #[error("evaluation failed and no failure floor is configured: {0}")]
    Unfloored(String),
    #[error("full evaluation needs {needed} evaluator calls but only {remaining} remain")]
    BudgetExhausted { needed: u64, remaining: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostConfig {
    pub capture_stdio: bool,
    pub timeout_ms: u64,
    /// Score assigned to failed evaluations; `None` turns failures into errors.
    pub failure_floor: Option<f64>,
    pub side_info_cap: usize,
    pub parallelism: usize,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            capture_stdio: false,
            timeout_ms: DEFAULT_TIMEOUT.as_millis() as u64,
            failure_floor: Some(0.0),
            side_info_cap: DEFAULT_SIDE_INFO_CAP,
            parallelism: 1,
        }
    }
}

/// One thing to evaluate a candidate on.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub objective: ObjectiveId,
    pub example: Option<Example>,
}

impl Target {
    pub fn scalar() -> Self {
        Self {
            objective: ObjectiveId::Scalar,
            example: None,
        }
    }

    pub fn example(example: &Example) -> Self {
        Self {
            objective: ObjectiveId::Example(example.id.clone()),
            example: Some(example.clone()),
        }
    }
}

pub struct EvaluationHost {
    evaluator: Arc<dyn Evaluator>,
    identity: EvaluatorIdentity,
    cache: EvaluationCache,
    config: HostConfig,
    invocations: AtomicU64,
}

impl EvaluationHost {
    pub fn new(evaluator: Arc<dyn Evaluator>, cache: EvaluationCache, config: HostConfig) -> Self {
        let identity = evaluator.identity();
        Self {
            evaluator,
            identity,
            cache,
            config,
            invocations: AtomicU64::new(0),
        }
    }

    pub fn identity(&self) -> &EvaluatorIdentity {
        &self.identity
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn cache(&self) -> &EvaluationCache {
        &self.cache
    }

    /// Number of times the evaluator has actually been invoked.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::SeqCst)
    }

    pub fn key(&self, text: &str, target: &Target) -> CacheKey {
        CacheKey::new(text, target.example.as_ref(), &self.identity)
    }

    pub fn is_cached(&self, text: &str, target: &Target) -> Result<bool, HostError> {
        Ok(self.cache.contains(&self.key(text, target))?)
    }

    /// Count of targets that would require an evaluator call.
    pub fn uncached(&self, text: &str, targets: &[Target]) -> Result<u64, HostError> {
        let mut n = 0;
        for t in targets {
            if !self.is_cached(text, t)? {
                n += 1;
            }
        }
        Ok(n)
    }

    /// Evaluates one candidate on one target, consulting the cache first.
    /// Budget is the caller's concern; see [`EvaluationHost::evaluate_full`].
    pub fn evaluate(&self, candidate: &Candidate, target: &Target) -> Result<EvaluationRecord, HostError> {
        let key = self.key(&candidate.text, target);
        if let Some(mut hit) = self.cache.get(&key)? {
            hit.candidate_id = candidate.id;
            hit.objective_id = target.objective.clone();
            hit.from_cache = true;
            return Ok(hit);
        }
        let request = EvaluationRequest {
            candidate_text: candidate.text.clone(),
            example: target.example.clone(),
            capture_stdio: self.config.capture_stdio,
            timeout: Duration::from_millis(self.config.timeout_ms.max(1)),
        };
        let started = Instant::now();
        self.invocations.fetch_add(1, Ordering::SeqCst);
        let outcome = self.invoke(request);
        let wall_time_ms = started.elapsed().as_millis() as u64;

        let (score, mut side_info, stdout, stderr) = match outcome {
            Ok(ev) => match Score::new(ev.score) {
                Ok(score) => (score, ev.side_info, ev.stdout, ev.stderr),
                Err(_) => {
                    let message = format!("evaluator returned non-finite score {}", ev.score);
                    let (score, si) = self.floored(&message)?;
                    (score, si, ev.stdout, ev.stderr)
                }
            },
            Err(failure) if failure.fatal => return Err(HostError::Evaluator(failure.message)),
            Err(failure) => {
                let (score, si) = self.floored(&failure.message)?;
                (score, si, failure.stdout, failure.stderr)
            }
        };
        if self.config.capture_stdio {
            for (name, text) in [("stdout", stdout), ("stderr", stderr)] {
                if !text.is_empty() {
                    side_info
                        .insert(name, SideInfoValue::Text(text))
                        .expect("text entries are always valid");
                }
            }
        }
        let side_info = cap_side_info(side_info, self.config.side_info_cap);
        let record = EvaluationRecord {
            candidate_id: candidate.id,
            objective_id: target.objective.clone(),
            score,
            side_info,
            evaluator_calls: 1,
            wall_time_ms,
            from_cache: false,
        };
        self.cache.put(&key, &record)?;
        Ok(record)
    }

    fn floored(&self, message: &str) -> Result<(Score, SideInfo), HostError> {
        let floor = self
            .config
            .failure_floor
            .ok_or_else(|| HostError::Unfloored(message.to_string()))?;
        let score = Score::new(floor).map_err(|e| HostError::Evaluator(e.to_string()))?;
        Ok((score, SideInfo::new().with_text(ERROR_KEY, message)))
    }

    fn invoke(&self, request: EvaluationRequest) -> Result<Evaluation, EvalFailure> {
        if self.evaluator.enforces_timeout() {
            return self.evaluator.evaluate(&request);
        }
        let timeout = request.timeout;
        let evaluator = Arc::clone(&self.evaluator);
        let (tx, rx) = mpsc::channel();
        let spawned = thread::Builder::new().name("evaluator".into()).spawn(move || {
            let _ = tx.send(evaluator.evaluate(&request));
        });
        if let Err(e) = spawned {
            return Err(EvalFailure::fatal(format!("cannot start evaluator thread: {e}")));
        }
        match rx.recv_timeout(timeout) {
            Ok(result) => result,
            Err(mpsc::RecvTimeoutError::Timeout) => Err(EvalFailure::new("timeout")),
            // The worker dropped its sender without sending: it panicked.
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(EvalFailure::new("evaluator panicked")),
        }
    }

    /// Evaluates `candidate` on every target and charges the budget for the
    /// uncached ones. Atomic: when the remaining budget cannot cover every
    /// uncached target nothing is dispatched. Output follows target order.
    pub fn evaluate_full(
        &self,
        candidate: &Candidate,
        targets: &[Target],
        budget: &mut Budget,
    ) -> Result<Vec<EvaluationRecord>, HostError> {
        let needed = self.uncached(&candidate.text, targets)?;
        if needed > budget.remaining() {
            return Err(HostError::BudgetExhausted {
                needed,
                remaining: budget.remaining(),
            });
        }
        let records = self.dispatch(candidate, targets)?;
        let calls: u64 = records
            .iter()
            .filter(|r| !r.from_cache)
            .map(|r| u64::from(r.evaluator_calls))
            .sum();
        budget.charge(calls).map_err(|_| HostError::BudgetExhausted {
            needed: calls,
            remaining: budget.remaining(),
        })?;
        Ok(records)
    }

    fn dispatch(&self, candidate: &Candidate, targets: &[Target]) -> Result<Vec<EvaluationRecord>, HostError> {
        let workers = self.config.parallelism.clamp(1, targets.len().max(1));
        if workers == 1 {
            return targets.iter().map(|t| self.evaluate(candidate, t)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<EvaluationRecord, HostError>>>> =
            Mutex::new((0..targets.len()).map(|_| None).collect());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= targets.len() {
                        break;
                    }
                    let r = self.evaluate(candidate, &targets[i]);
                    slots.lock().expect("slot lock")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("slot lock")
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }
}

/// Truncates side info whose serialized size exceeds `cap` bytes. Entries are
/// kept in order while they fit; the first text entry that overflows is cut
/// at a char boundary, later entries are dropped, and a marker is appended.
pub fn cap_side_info(side_info: SideInfo, cap: usize) -> SideInfo {
    let size = |si: &SideInfo| serde_json::to_vec(si).map_or(0, |v| v.len());
    let total = size(&side_info);
    if total <= cap {
        return side_info;
    }
    let marker = format!("side info truncated from {total} bytes to fit {cap}");
    let budget = cap.saturating_sub(marker.len() + 64);
    let mut out = SideInfo::new();
    let mut used = 2usize;
    let mut dropped = false;
    for (name, value) in side_info.iter() {
        if dropped {
            break;
        }
        let entry_size = serde_json::to_vec(value).map_or(0, |v| v.len()) + name.len() + 4;
        if used + entry_size <= budget {
            used += entry_size;
            let _ = out.insert(name.clone(), value.clone());
            continue;
        }
        dropped = true;
        if let SideInfoValue::Text(text) = value {
            let room = budget.saturating_sub(used + name.len() + 40);
            let mut cut = room.min(text.len());
            while cut > 0 && !text.is_char_boundary(cut) {
                cut -= 1;
            }
            if cut > 0 {
                let _ = out.insert(name.clone(), SideInfoValue::Text(text[..cut].to_string()));
            }
        }
    }
    let _ = out.insert(TRUNCATED_KEY, SideInfoValue::Text(marker));
    out
}
