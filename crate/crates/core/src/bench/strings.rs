//! Toy string-matching tasks used to exercise every optimization mode offline.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{Evaluator, EvaluatorIdentity, FnEvaluator};
use crate::model::{Example, Score, SideInfo, SideInfoValue, TableRow};
use crate::proposer::{ReflectionContext, TransportError};

/// Marker used in diff tables for a position past the end of a string.
pub const END_MARKER: &str = "<end>";
const DIFF_ROWS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StringScorer {
    /// Occurrences of `ch`, normalised by `cap` (default: target length).
    CharCount {
        ch: char,
        #[serde(default)]
        cap: Option<usize>,
    },
    /// Length of the common prefix over the target length.
    PrefixMatchLen,
    /// One minus normalised Levenshtein distance.
    EditSimilarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StringTask {
    pub target: String,
    pub scorer: StringScorer,
}

impl StringTask {
    pub fn new(target: impl Into<String>, scorer: StringScorer) -> Result<Self, String> {
        let task = Self {
            target: target.into(),
            scorer,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn prefix(target: impl Into<String>) -> Self {
        Self::new(target, StringScorer::PrefixMatchLen).expect("non-empty target")
    }

    fn validate(&self) -> Result<(), String> {
        if self.target.is_empty() {
            return Err("string task target must be non-empty".into());
        }
        if let StringScorer::CharCount { cap: Some(0), .. } = self.scorer {
            return Err("char_count cap must be positive".into());
        }
        Ok(())
    }

    pub fn from_payload(payload: &serde_json::Value) -> Result<Self, String> {
        let task: Self =
            serde_json::from_value(payload.clone()).map_err(|e| format!("bad string task payload: {e}"))?;
        task.validate()?;
        Ok(task)
    }

    pub fn to_payload(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("task serializes")
    }
}

fn prefix_len(a: &[char], b: &[char]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Scores `candidate` in `[0, 1]`. Side info reports the first mismatching
/// position and a short diff table starting there.
pub fn score_string(candidate: &str, task: &StringTask) -> (Score, SideInfo) {
    let cand: Vec<char> = candidate.chars().collect();
    let target: Vec<char> = task.target.chars().collect();
    let value = match task.scorer {
        StringScorer::CharCount { ch, cap } => {
            let cap = cap.unwrap_or(target.len()) as f64;
            (cand.iter().filter(|c| **c == ch).count() as f64 / cap).min(1.0)
        }
        StringScorer::PrefixMatchLen => prefix_len(&cand, &target) as f64 / target.len() as f64,
        StringScorer::EditSimilarity => {
            let longest = cand.len().max(target.len());
            1.0 - levenshtein(&cand, &target) as f64 / longest as f64
        }
    };
    let mut si = SideInfo::new();
    let mismatch = prefix_len(&cand, &target);
    if mismatch == cand.len() && mismatch == target.len() {
        si.insert("status", SideInfoValue::Text("exact match".into()))
            .expect("valid entry");
    } else {
        si.insert("first_mismatch", SideInfoValue::Number(mismatch as f64))
            .expect("valid entry");
        let show = |s: &[char], i: usize| s.get(i).map_or(END_MARKER.to_string(), |c| c.to_string());
        let rows: Vec<TableRow> = (mismatch..cand.len().max(target.len()))
            .take(DIFF_ROWS)
            .map(|i| {
                [
                    ("position".to_string(), i.to_string()),
                    ("expected".to_string(), show(&target, i)),
                    ("actual".to_string(), show(&cand, i)),
                ]
                .into_iter()
                .collect()
            })
            .collect();
        si.insert("diff", SideInfoValue::Table(rows)).expect("valid entry");
    }
    (Score::new(value).expect("finite score"), si)
}

/// Evaluator for a single fixed task, used without a dataset.
pub fn fixed_task_evaluator(task: StringTask) -> Arc<dyn Evaluator> {
    Arc::new(FnEvaluator::new(
        EvaluatorIdentity::new("bench.string_task", "1"),
        move |text, example| {
            let task = match example {
                Some(e) => StringTask::from_payload(&e.payload)?,
                None => task.clone(),
            };
            let (score, si) = score_string(text, &task);
            Ok((score.value(), si))
        },
    ))
}

/// Evaluator reading the task from each example's payload.
pub fn string_task_evaluator() -> Arc<dyn Evaluator> {
    Arc::new(FnEvaluator::new(
        EvaluatorIdentity::new("bench.string_task", "1"),
        |text, example| {
            let example = example.ok_or("string task evaluator needs an example payload")?;
            let task = StringTask::from_payload(&example.payload)?;
            let (score, si) = score_string(text, &task);
            Ok((score.value(), si))
        },
    ))
}

fn random_word<R: Rng>(rng: &mut R, len: usize) -> String {
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

/// `n` distinct targets sharing a common stem, deterministic in `seed`.
fn targets(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = random_word(&mut rng, 4);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(3..=5);
        let t = format!("{stem}{}", random_word(&mut rng, len));
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

/// `k` prefix-matching tasks with ids `task-0..task-{k-1}`.
pub fn make_multitask_suite(k: usize, seed: u64) -> Vec<Example> {
    targets(k, seed)
        .into_iter()
        .enumerate()
        .map(|(i, t)| Example::train(format!("task-{i}"), StringTask::prefix(t).to_payload()))
        .collect()
}

/// `k` training and `m` validation tasks drawn from the same family.
pub fn make_generalization_suite(k: usize, m: usize, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let all = targets(k + m, seed);
    let train = all[..k]
        .iter()
        .enumerate()
        .map(|(i, t)| Example::train(format!("train-{i}"), StringTask::prefix(t.as_str()).to_payload()))
        .collect();
    let val = all[k..]
        .iter()
        .enumerate()
        .map(|(i, t)| Example::val(format!("val-{i}"), StringTask::prefix(t.as_str()).to_payload()))
        .collect();
    (train, val)
}

/// Fix proposed from one feedback entry's diff table: keep the parent up to
/// the first mismatch and append the expected character (or stop there when
/// the parent runs past the target).
fn fix_from(parent: &str, si: &SideInfo) -> Option<String> {
    let SideInfoValue::Table(rows) = si.get("diff")? else {
        return None;
    };
    let first = rows.first()?;
    let pos: usize = first.get("position")?.parse().ok()?;
    let expected = first.get("expected")?;
    let mut out: String = parent.chars().take(pos).collect();
    if expected != END_MARKER {
        out.push_str(expected);
    }
    (out != parent).then_some(out)
}

/// Scripted proposer that repairs the first mismatch it finds in the
/// minibatch feedback. With no actionable feedback it echoes the parent.
pub fn mismatch_fixer() -> impl FnMut(&ReflectionContext) -> Result<String, TransportError> {
    |ctx: &ReflectionContext| {
        let parent = ctx.parent_text.clone().unwrap_or_default();
        Ok(ctx
            .minibatch
            .iter()
            .find_map(|e| fix_from(&parent, &e.side_info))
            .unwrap_or(parent))
    }
}
