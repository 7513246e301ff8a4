//! Checkpoint and run-configuration files.
//!
//! Every file is compact JSON as produced by `serde_json` (objects in the
//! field order of the Rust types, JSON-object payloads with sorted keys), so
//! loading and re-saving reproduces the same bytes.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineConfig, OutcomeCounts};
use crate::eval::EvaluatorIdentity;
use crate::model::{
    derive_mode, Budget, Candidate, CandidateId, EvaluationRecord, Example, Mode, ObjectiveId, Origin, SCHEMA_VERSION,
};
use crate::pareto::ParetoState;
use crate::proposer::TEMPLATE_ID;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint uses schema version {found}, this build reads version {supported}; migrate it first")]
    Migration { found: u32, supported: u32 },
    #[error("checkpoint was rendered with prompt template {found:?}, this build uses {supported:?}")]
    TemplateMismatch { found: String, supported: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub schema_version: u32,
    pub template_id: String,
    pub engine_config: EngineConfig,
    pub mode: Mode,
    pub evaluator: EvaluatorIdentity,
    pub dataset: Vec<Example>,
    pub valset: Vec<Example>,
    pub candidates: Vec<Candidate>,
    /// Sorted by (candidate, objective).
    pub records: Vec<EvaluationRecord>,
    /// Absent while the seed is still unevaluated.
    pub pareto: Option<ParetoState>,
    pub rng: ChaCha8Rng,
    pub budget: Budget,
    pub iteration: u64,
    pub counts: OutcomeCounts,
    pub budget_halt: Option<u64>,
}

fn corrupt(msg: impl Into<String>) -> PersistError {
    PersistError::Corrupt(msg.into())
}

impl RunCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("checkpoint serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        #[derive(Deserialize)]
        struct Header {
            schema_version: u32,
        }
        let header: Header = serde_json::from_slice(bytes).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(PersistError::Migration {
                found: header.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        let checkpoint: Self = serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
        checkpoint.validate()?;
        Ok(checkpoint)
    }

    /// Structural invariants a well-formed checkpoint always satisfies.
    pub fn validate(&self) -> Result<(), PersistError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(PersistError::Migration {
                found: self.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        if self.template_id != TEMPLATE_ID {
            return Err(PersistError::TemplateMismatch {
                found: self.template_id.clone(),
                supported: TEMPLATE_ID.to_string(),
            });
        }
        let mode =
            derive_mode(!self.dataset.is_empty(), !self.valset.is_empty()).map_err(|e| corrupt(e.to_string()))?;
        if mode != self.mode {
            return Err(corrupt(format!(
                "mode {:?} does not match the stored examples",
                self.mode
            )));
        }
        if self.candidates.is_empty() {
            return Err(corrupt("no seed candidate"));
        }
        let mut texts = BTreeSet::new();
        for (i, c) in self.candidates.iter().enumerate() {
            if c.id != CandidateId(i as u64) {
                return Err(corrupt(format!("candidate at position {i} has id {}", c.id)));
            }
            if !texts.insert(c.text.as_str()) {
                return Err(corrupt(format!("candidate {} duplicates an earlier text", c.id)));
            }
            match (c.origin, c.parent_id) {
                (Origin::Seed | Origin::Bootstrap, None) if i == 0 => {}
                (Origin::Mutation | Origin::Refined, Some(p)) if i > 0 => {
                    let parent = self
                        .candidates
                        .get(p.0 as usize)
                        .filter(|_| p.0 < i as u64)
                        .ok_or_else(|| corrupt(format!("candidate {} has unknown parent {p}", c.id)))?;
                    if parent.created_at_iteration >= c.created_at_iteration {
                        return Err(corrupt(format!("candidate {} is not younger than its parent", c.id)));
                    }
                }
                _ => return Err(corrupt(format!("candidate {} has inconsistent lineage", c.id))),
            }
            if c.created_at_iteration > self.iteration {
                return Err(corrupt(format!("candidate {} comes from a future iteration", c.id)));
            }
        }
        let example_ids: BTreeSet<&str> = self.dataset.iter().chain(&self.valset).map(|e| e.id.as_str()).collect();
        let mut charged = 0u64;
        for pair in self.records.windows(2) {
            if (pair[0].candidate_id, &pair[0].objective_id) >= (pair[1].candidate_id, &pair[1].objective_id) {
                return Err(corrupt("evaluation records are unsorted or duplicated"));
            }
        }
        for r in &self.records {
            if r.candidate_id.0 as usize >= self.candidates.len() {
                return Err(corrupt(format!("record for unknown candidate {}", r.candidate_id)));
            }
            let known = match &r.objective_id {
                ObjectiveId::Scalar => self.mode == Mode::SingleTask,
                ObjectiveId::Example(id) => example_ids.contains(id.as_str()),
                ObjectiveId::Metric(_) => false,
            };
            if !known {
                return Err(corrupt(format!("record for unknown objective {}", r.objective_id)));
            }
            if !r.from_cache {
                charged += u64::from(r.evaluator_calls);
            }
        }
        if charged != self.budget.consumed {
            return Err(corrupt(format!(
                "budget says {} calls consumed but records account for {charged}",
                self.budget.consumed
            )));
        }
        if let Some(pareto) = &self.pareto {
            pareto.validate().map_err(|e| corrupt(e.to_string()))?;
            for (id, _) in pareto.rows() {
                if id.0 as usize >= self.candidates.len() {
                    return Err(corrupt(format!("frontier references unknown candidate {id}")));
                }
            }
        }
        Ok(())
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let io = |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(bytes).map_err(io)?;
    file.sync_all().map_err(io)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io)
}

pub fn save_checkpoint(checkpoint: &RunCheckpoint, path: &Path) -> Result<(), PersistError> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<RunCheckpoint, PersistError> {
    let bytes = fs::read(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunCheckpoint::from_bytes(&bytes)
}
