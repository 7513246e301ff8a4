//! Shared vocabulary: candidates, examples, scores, side information,
//! optimization modes and budget accounting.
//!
//! Every type here is an immutable value once built and serializes to the
//! canonical JSON form used by checkpoints and the subprocess protocol.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Version stamped into every persisted document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("score must be finite, got {0}")]
    NonFiniteScore(f64),
    #[error("side info entry {name:?} holds a non-finite number")]
    NonFiniteSideInfo { name: String },
    #[error("image reference {name:?} has an empty media type")]
    EmptyMediaType { name: String },
    #[error("a valset was supplied without a dataset")]
    ValsetWithoutDataset,
    #[error("aggregate of an empty record list")]
    EmptyRecords,
    #[error("records belong to more than one candidate")]
    MixedCandidates,
    #[error("invalid objective id {0:?}")]
    BadObjectiveId(String),
    #[error("budget exceeded: need {needed}, remaining {remaining}")]
    BudgetExceeded { needed: u64, remaining: u64 },
}

/// Run-local candidate identity, assigned monotonically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateId(pub u64);

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Bootstrap,
    Mutation,
    Refined,
}

/// A text artifact plus its lineage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: CandidateId,
    pub text: String,
    pub parent_id: Option<CandidateId>,
    pub origin: Origin,
    pub created_at_iteration: u64,
}

impl Candidate {
    pub fn root(id: CandidateId, text: impl Into<String>, origin: Origin) -> Self {
        debug_assert!(matches!(origin, Origin::Seed | Origin::Bootstrap));
        Self {
            id,
            text: text.into(),
            parent_id: None,
            origin,
            created_at_iteration: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One dataset element. The payload is opaque to the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub payload: serde_json::Value,
    pub split: Split,
}

impl Example {
    pub fn train(id: impl Into<String>, payload: serde_json::Value) -> Self {
        Self {
            id: id.into(),
            payload,
            split: Split::Train,
        }
    }

    pub fn val(id: impl Into<String>, payload: serde_json::Value) -> Self {
        Self {
            id: id.into(),
            payload,
            split: Split::Val,
        }
    }
}

/// A finite score; higher is better.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct Score(f64);

impl Score {
    pub fn new(value: f64) -> Result<Self, ModelError> {
        if value.is_finite() {
            Ok(Self(value))
        } else {
            Err(ModelError::NonFiniteScore(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Score::new(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Path(PathBuf),
    /// Base64 (standard alphabet) encoded bytes.
    Base64(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub media_type: String,
    pub source: ImageSource,
}

impl ImageRef {
    pub fn from_bytes(media_type: impl Into<String>, bytes: &[u8]) -> Self {
        use base64::Engine as _;
        Self {
            media_type: media_type.into(),
            source: ImageSource::Base64(base64::engine::general_purpose::STANDARD.encode(bytes)),
        }
    }

    /// Raw image bytes, reading from disk for path references.
    pub fn bytes(&self) -> std::io::Result<Vec<u8>> {
        use base64::Engine as _;
        match &self.source {
            ImageSource::Path(p) => std::fs::read(p),
            ImageSource::Base64(b) => base64::engine::general_purpose::STANDARD
                .decode(b)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        }
    }
}

pub type TableRow = IndexMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum SideInfoValue {
    Text(String),
    Number(f64),
    Table(Vec<TableRow>),
    SubScores(IndexMap<String, f64>),
    ImageRef(ImageRef),
}

impl SideInfoValue {
    fn check(&self, name: &str) -> Result<(), ModelError> {
        match self {
            SideInfoValue::Number(v) if !v.is_finite() => Err(ModelError::NonFiniteSideInfo { name: name.to_string() }),
            SideInfoValue::SubScores(m) if m.values().any(|v| !v.is_finite()) => {
                Err(ModelError::NonFiniteSideInfo { name: name.to_string() })
            }
            SideInfoValue::ImageRef(img) if img.media_type.trim().is_empty() => {
                Err(ModelError::EmptyMediaType { name: name.to_string() })
            }
            _ => Ok(()),
        }
    }

    /// Decodes the loose value shapes evaluators are allowed to emit:
    /// strings, numbers, objects of numbers (sub-scores), arrays of objects
    /// (tables) and the tagged canonical form. Anything else is kept as its
    /// compact JSON text.
    pub fn from_loose_json(value: serde_json::Value) -> Self {
        use serde_json::Value;
        if let Value::Object(map) = &value {
            if map.contains_key("type") {
                if let Ok(v) = serde_json::from_value::<SideInfoValue>(value.clone()) {
                    return v;
                }
            }
        }
        match value {
            Value::String(s) => SideInfoValue::Text(s),
            Value::Number(n) => match n.as_f64() {
                Some(v) if v.is_finite() => SideInfoValue::Number(v),
                _ => SideInfoValue::Text(n.to_string()),
            },
            Value::Object(map) if !map.is_empty() && map.values().all(|v| v.as_f64().is_some_and(f64::is_finite)) => {
                SideInfoValue::SubScores(
                    map.into_iter()
                        .map(|(k, v)| (k, v.as_f64().unwrap_or_default()))
                        .collect(),
                )
            }
            Value::Array(rows) if !rows.is_empty() && rows.iter().all(Value::is_object) => SideInfoValue::Table(
                rows.into_iter()
                    .map(|row| match row {
                        Value::Object(m) => m
                            .into_iter()
                            .map(|(k, v)| {
                                let cell = match v {
                                    Value::String(s) => s,
                                    other => other.to_string(),
                                };
                                (k, cell)
                            })
                            .collect(),
                        _ => TableRow::new(),
                    })
                    .collect(),
            ),
            other => SideInfoValue::Text(other.to_string()),
        }
    }
}

/// Ordered, uniquely named diagnostics attached to one evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SideInfo {
    entries: IndexMap<String, SideInfoValue>,
}

impl SideInfo {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry. Replacement keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, value: SideInfoValue) -> Result<(), ModelError> {
        let name = name.into();
        value.check(&name)?;
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn with_text(mut self, name: impl Into<String>, text: impl Into<String>) -> Self {
        self.entries.insert(name.into(), SideInfoValue::Text(text.into()));
        self
    }

    pub fn get(&self, name: &str) -> Option<&SideInfoValue> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<SideInfoValue> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SideInfoValue)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_failure(&self) -> bool {
        self.entries.contains_key(ERROR_KEY)
    }

    /// All sub-score entries flattened in insertion order.
    pub fn sub_scores(&self) -> impl Iterator<Item = (&String, f64)> {
        self.entries.values().flat_map(|v| match v {
            SideInfoValue::SubScores(m) => m.iter().map(|(k, v)| (k, *v)).collect::<Vec<_>>(),
            _ => Vec::new(),
        })
    }

    pub fn images(&self) -> impl Iterator<Item = (&String, &ImageRef)> {
        self.entries.iter().filter_map(|(k, v)| match v {
            SideInfoValue::ImageRef(img) => Some((k, img)),
            _ => None,
        })
    }
}

impl<'de> Deserialize<'de> for SideInfo {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = IndexMap::<String, SideInfoValue>::deserialize(d)?;
        for (name, value) in &entries {
            value.check(name).map_err(serde::de::Error::custom)?;
        }
        Ok(Self { entries })
    }
}

/// Side info key carrying failure diagnostics.
pub const ERROR_KEY: &str = "Error";

/// What a record scores: the whole candidate, one example, or one metric.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectiveId {
    Scalar,
    Example(String),
    Metric(String),
}

impl fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveId::Scalar => f.write_str("scalar"),
            ObjectiveId::Example(id) => write!(f, "example:{id}"),
            ObjectiveId::Metric(name) => write!(f, "metric:{name}"),
        }
    }
}

impl FromStr for ObjectiveId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "scalar" {
            Ok(ObjectiveId::Scalar)
        } else if let Some(id) = s.strip_prefix("example:") {
            Ok(ObjectiveId::Example(id.to_string()))
        } else if let Some(name) = s.strip_prefix("metric:") {
            Ok(ObjectiveId::Metric(name.to_string()))
        } else {
            Err(ModelError::BadObjectiveId(s.to_string()))
        }
    }
}

impl Serialize for ObjectiveId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectiveId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Evidence for one (candidate, objective) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub candidate_id: CandidateId,
    pub objective_id: ObjectiveId,
    pub score: Score,
    pub side_info: SideInfo,
    pub evaluator_calls: u32,
    pub wall_time_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleTask,
    MultiTask,
    Generalization,
}

pub fn derive_mode(has_dataset: bool, has_valset: bool) -> Result<Mode, ModelError> {
    match (has_dataset, has_valset) {
        (false, false) => Ok(Mode::SingleTask),
        (true, false) => Ok(Mode::MultiTask),
        (true, true) => Ok(Mode::Generalization),
        (false, true) => Err(ModelError::ValsetWithoutDataset),
    }
}

/// Count of non-cached evaluator calls allowed and spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_evaluator_calls: u64,
    pub consumed: u64,
}

impl Budget {
    pub fn new(max_evaluator_calls: u64) -> Self {
        Self {
            max_evaluator_calls,
            consumed: 0,
        }
    }

    pub fn remaining(&self) -> u64 {
        self.max_evaluator_calls.saturating_sub(self.consumed)
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == 0
    }

    pub fn charge(&mut self, calls: u64) -> Result<(), ModelError> {
        if calls > self.remaining() {
            return Err(ModelError::BudgetExceeded {
                needed: calls,
                remaining: self.remaining(),
            });
        }
        self.consumed += calls;
        Ok(())
    }
}

/// Arithmetic mean of the scores of one candidate's records.
pub fn aggregate_score(records: &[EvaluationRecord]) -> Result<f64, ModelError> {
    let first = records.first().ok_or(ModelError::EmptyRecords)?;
    if records.iter().any(|r| r.candidate_id != first.candidate_id) {
        return Err(ModelError::MixedCandidates);
    }
    Ok(mean(records.iter().map(|r| r.score.value())))
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
