//! The budgeted search loop: select a parent from the frontier, score it and
//! a reflective proposal on a minibatch, and fully evaluate proposals that
//! strictly improve on it.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvaluationHost, HostError, Target};
use crate::model::{
    derive_mode, mean, Budget, Candidate, CandidateId, EvaluationRecord, Example, Mode, ModelError, ObjectiveId,
    Origin, Split, SCHEMA_VERSION,
};
use crate::pareto::{ParetoError, ParetoState};
use crate::persist::{self, RunCheckpoint};
use crate::proposer::{FrontierEntry, MinibatchEntry, Proposer, ProposerError, ReflectionContext, TEMPLATE_ID};

pub const DEFAULT_MINIBATCH_SIZE: usize = 3;
pub const DEFAULT_MAX_ITERATIONS: u64 = 10_000;
pub const DEFAULT_CHECKPOINT_EVERY: u64 = 10;
pub const DEFAULT_FRONTIER_DIGEST: usize = 2;
pub const DEFAULT_DIGEST_TEXT_BYTES: usize = 4096;
const SUMMARY_PAYLOAD_CHARS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceptance {
    /// Proposal minibatch mean must strictly exceed the parent's.
    #[default]
    StrictImprovement,
}

fn default_minibatch_size() -> usize {
    DEFAULT_MINIBATCH_SIZE
}
fn default_max_iterations() -> u64 {
    DEFAULT_MAX_ITERATIONS
}
fn default_checkpoint_every() -> u64 {
    DEFAULT_CHECKPOINT_EVERY
}
fn default_frontier_digest() -> usize {
    DEFAULT_FRONTIER_DIGEST
}
fn default_digest_text_bytes() -> usize {
    DEFAULT_DIGEST_TEXT_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default = "default_minibatch_size")]
    pub minibatch_size: usize,
    pub max_evaluator_calls: u64,
    #[serde(default)]
    pub seed: Option<String>,
    #[serde(default)]
    pub objective: Option<String>,
    #[serde(default)]
    pub background: Option<String>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub acceptance: Acceptance,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    /// How many other frontier members are shown to the proposer.
    #[serde(default = "default_frontier_digest")]
    pub frontier_digest: usize,
    /// Digest texts longer than this are cut at a char boundary.
    #[serde(default = "default_digest_text_bytes")]
    pub digest_text_bytes: usize,
}

impl EngineConfig {
    pub fn new(max_evaluator_calls: u64) -> Self {
        Self {
            minibatch_size: DEFAULT_MINIBATCH_SIZE,
            max_evaluator_calls,
            seed: None,
            objective: None,
            background: None,
            rng_seed: 0,
            acceptance: Acceptance::StrictImprovement,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            frontier_digest: DEFAULT_FRONTIER_DIGEST,
            digest_text_bytes: DEFAULT_DIGEST_TEXT_BYTES,
        }
    }

    pub fn with_seed(mut self, seed: impl Into<String>) -> Self {
        self.seed = Some(seed.into());
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.minibatch_size == 0 {
            return Err(EngineError::Config("minibatch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(EngineError::Config("checkpoint_every must be at least 1".into()));
        }
        match (&self.seed, &self.objective) {
            (None, None) => Err(EngineError::Config(
                "either a seed candidate or an objective is required".into(),
            )),
            (None, Some(o)) if o.trim().is_empty() => Err(EngineError::Config(
                "objective must be non-empty when no seed candidate is given".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeReason {
    Accepted,
    RejectedNoImprovement,
    /// Proposal text equals an existing candidate; no evaluator call made.
    RejectedDuplicate,
    ProposalFailed,
    BudgetExhausted,
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationOutcome {
    pub iteration: u64,
    pub parent_id: CandidateId,
    pub proposal_id: Option<CandidateId>,
    pub accepted: bool,
    pub minibatch_example_ids: Vec<String>,
    pub reason: OutcomeReason,
    pub parent_minibatch_score: f64,
    pub proposal_minibatch_score: Option<f64>,
    pub budget_consumed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub accepted: u64,
    pub rejected_no_improvement: u64,
    pub rejected_duplicate: u64,
    pub proposal_failed: u64,
    pub budget_exhausted: u64,
}

impl OutcomeCounts {
    fn bump(&mut self, reason: OutcomeReason) {
        let slot = match reason {
            OutcomeReason::Accepted => &mut self.accepted,
            OutcomeReason::RejectedNoImprovement => &mut self.rejected_no_improvement,
            OutcomeReason::RejectedDuplicate => &mut self.rejected_duplicate,
            OutcomeReason::ProposalFailed => &mut self.proposal_failed,
            OutcomeReason::BudgetExhausted => &mut self.budget_exhausted,
        };
        *slot += 1;
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not bootstrap a seed candidate: {0}")]
    Bootstrap(ProposerError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] persist::PersistError),
    #[error("trajectory log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub id: CandidateId,
    pub text: String,
    pub origin: Origin,
    pub parent_id: Option<CandidateId>,
    /// Mean over the search objectives; absent when never evaluated.
    pub aggregate: Option<f64>,
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_aggregate: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub val_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestSelection {
    Single(CandidateSummary),
    /// Example id to the candidate best on that example.
    PerTask(BTreeMap<String, CandidateSummary>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageStep {
    pub iteration: u64,
    pub candidate_id: CandidateId,
    pub parent_id: CandidateId,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub iterations: u64,
    pub counts: OutcomeCounts,
    pub candidates: u64,
    /// Accepted candidates in creation order.
    pub accepted: Vec<LineageStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub schema_version: u32,
    pub mode: Mode,
    pub best: BestSelection,
    pub objectives: Vec<ObjectiveId>,
    pub frontier: ParetoState,
    pub trajectory: TrajectorySummary,
    pub budget: Budget,
}

impl OptimizationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("result serializes")
    }

    /// Score printed by the CLI: aggregate (val aggregate in generalization
    /// mode) of the single best, or the mean of per-task best scores.
    pub fn headline_score(&self) -> Option<f64> {
        match &self.best {
            BestSelection::Single(c) => match self.mode {
                Mode::Generalization => c.val_aggregate,
                _ => c.aggregate,
            },
            BestSelection::PerTask(map) => {
                let scores: Option<Vec<f64>> = map
                    .iter()
                    .map(|(task, c)| c.scores.get(&ObjectiveId::Example(task.clone()).to_string()).copied())
                    .collect();
                scores.map(mean)
            }
        }
    }
}

/// Mutable search state; everything here is checkpointed.
#[derive(Debug, Clone)]
pub(crate) struct EngineState {
    pub(crate) candidates: Vec<Candidate>,
    pub(crate) records: BTreeMap<(CandidateId, ObjectiveId), EvaluationRecord>,
    pub(crate) pareto: Option<ParetoState>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) budget: Budget,
    pub(crate) iteration: u64,
    pub(crate) counts: OutcomeCounts,
    /// Budget limit in force when an evaluation could not be afforded.
    pub(crate) budget_halt: Option<u64>,
}

pub struct Engine {
    config: EngineConfig,
    mode: Mode,
    dataset: Vec<Example>,
    valset: Vec<Example>,
    host: EvaluationHost,
    proposer: Proposer,
    state: EngineState,
    texts: HashMap<String, CandidateId>,
    trajectory: Option<Box<dyn Write>>,
    checkpoint_path: Option<PathBuf>,
}

fn validate_examples(dataset: &[Example], valset: &[Example]) -> Result<(), EngineError> {
    let mut seen = std::collections::BTreeSet::new();
    for (list, split, name) in [(dataset, Split::Train, "dataset"), (valset, Split::Val, "valset")] {
        for e in list {
            if e.split != split {
                return Err(EngineError::Config(format!(
                    "example {:?} in {name} has the wrong split",
                    e.id
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(EngineError::Config(format!("duplicate example id {:?}", e.id)));
            }
        }
    }
    Ok(())
}

fn summary_for(example: Option<&Example>) -> String {
    match example {
        None => "candidate evaluation".to_string(),
        Some(e) => {
            let payload = e.payload.to_string();
            let mut cut: String = payload.chars().take(SUMMARY_PAYLOAD_CHARS).collect();
            if cut.len() < payload.len() {
                cut.push_str("...");
            }
            format!("example {}, input {cut}", e.id)
        }
    }
}

fn clip_text(text: &str, max_bytes: usize) -> String {
    if text.len() <= max_bytes {
        return text.to_string();
    }
    let mut end = max_bytes;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}\n[... {} more bytes]", &text[..end], text.len() - end)
}

impl Engine {
    /// Sets up a run: bootstraps a seed when none is configured, then scores
    /// the seed on the full objective set if the budget allows it.
    pub fn new(
        config: EngineConfig,
        host: EvaluationHost,
        mut proposer: Proposer,
        dataset: Option<Vec<Example>>,
        valset: Option<Vec<Example>>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        if dataset.as_ref().is_some_and(Vec::is_empty) {
            return Err(EngineError::Config("dataset must not be empty".into()));
        }
        if valset.as_ref().is_some_and(Vec::is_empty) {
            return Err(EngineError::Config("valset must not be empty".into()));
        }
        let mode = derive_mode(dataset.is_some(), valset.is_some())?;
        let dataset = dataset.unwrap_or_default();
        let valset = valset.unwrap_or_default();
        validate_examples(&dataset, &valset)?;

        let seed = match &config.seed {
            Some(text) => Candidate::root(CandidateId(0), text.clone(), Origin::Seed),
            None => bootstrap_seed(&config, &mut proposer)?,
        };
        let state = EngineState {
            candidates: Vec::new(),
            records: BTreeMap::new(),
            pareto: None,
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            budget: Budget::new(config.max_evaluator_calls),
            iteration: 0,
            counts: OutcomeCounts::default(),
            budget_halt: None,
        };
        let mut engine = Self {
            config,
            mode,
            dataset,
            valset,
            host,
            proposer,
            state,
            texts: HashMap::new(),
            trajectory: None,
            checkpoint_path: None,
        };
        engine.add_candidate(seed);
        engine.evaluate_seed()?;
        Ok(engine)
    }

    /// Continues a checkpointed run. The evaluation store is loaded into the
    /// host cache so already-paid evaluations are never repeated.
    pub fn resume(checkpoint: RunCheckpoint, host: EvaluationHost, proposer: Proposer) -> Result<Self, EngineError> {
        checkpoint.validate()?;
        if checkpoint.evaluator != *host.identity() {
            log::warn!(
                "checkpoint was produced by evaluator {:?}, resuming with {:?}",
                checkpoint.evaluator,
                host.identity()
            );
        }
        let RunCheckpoint {
            engine_config,
            mode,
            dataset,
            valset,
            candidates,
            records,
            pareto,
            rng,
            budget,
            iteration,
            counts,
            budget_halt,
            ..
        } = checkpoint;
        let mut engine = Self {
            config: engine_config,
            mode,
            dataset,
            valset,
            host,
            proposer,
            state: EngineState {
                candidates: Vec::new(),
                records: BTreeMap::new(),
                pareto,
                rng,
                budget,
                iteration,
                counts,
                budget_halt,
            },
            texts: HashMap::new(),
            trajectory: None,
            checkpoint_path: None,
        };
        for c in candidates {
            engine.add_candidate(c);
        }
        for r in records {
            let text = &engine.state.candidates[r.candidate_id.0 as usize].text;
            let target = engine.target_for(&r.objective_id);
            engine.host.cache().prime(engine.host.key(text, &target), r.clone());
            engine.state.records.insert((r.candidate_id, r.objective_id.clone()), r);
        }
        if engine.state.pareto.is_none() {
            engine.evaluate_seed()?;
        }
        Ok(engine)
    }

    pub fn with_trajectory(mut self, sink: Box<dyn Write>) -> Self {
        self.trajectory = Some(sink);
        self
    }

    /// Checkpoint every `checkpoint_every` iterations and when the run ends.
    pub fn with_checkpoint_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    /// Changes the total evaluator-call limit, e.g. when resuming.
    pub fn set_budget_limit(&mut self, max_evaluator_calls: u64) {
        self.config.max_evaluator_calls = max_evaluator_calls;
        self.state.budget.max_evaluator_calls = max_evaluator_calls;
    }

    pub fn set_max_iterations(&mut self, max_iterations: u64) {
        self.config.max_iterations = max_iterations;
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn host(&self) -> &EvaluationHost {
        &self.host
    }

    pub fn budget(&self) -> Budget {
        self.state.budget
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.state.candidates
    }

    pub fn pareto(&self) -> Option<&ParetoState> {
        self.state.pareto.as_ref()
    }

    pub fn records(&self) -> impl Iterator<Item = &EvaluationRecord> {
        self.state.records.values()
    }

    pub fn records_for(&self, id: CandidateId) -> impl Iterator<Item = &EvaluationRecord> {
        self.state
            .records
            .range((id, ObjectiveId::Scalar)..)
            .take_while(move |((c, _), _)| *c == id)
            .map(|(_, r)| r)
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        if self.state.budget.is_exhausted() || self.state.budget_halt == Some(self.state.budget.max_evaluator_calls) {
            Some(StopReason::BudgetExhausted)
        } else if self.state.iteration >= self.config.max_iterations {
            Some(StopReason::IterationCap)
        } else {
            None
        }
    }

    fn add_candidate(&mut self, candidate: Candidate) {
        debug_assert_eq!(candidate.id.0 as usize, self.state.candidates.len());
        self.texts.entry(candidate.text.clone()).or_insert(candidate.id);
        self.state.candidates.push(candidate);
    }

    fn target_for(&self, objective: &ObjectiveId) -> Target {
        match objective {
            ObjectiveId::Example(id) => self
                .dataset
                .iter()
                .chain(&self.valset)
                .find(|e| &e.id == id)
                .map(Target::example)
                .unwrap_or_else(|| Target {
                    objective: objective.clone(),
                    example: None,
                }),
            _ => Target::scalar(),
        }
    }

    fn train_targets(&self) -> Vec<Target> {
        if self.mode == Mode::SingleTask {
            vec![Target::scalar()]
        } else {
            self.dataset.iter().map(Target::example).collect()
        }
    }

    fn full_targets(&self) -> Vec<Target> {
        let mut t = self.train_targets();
        t.extend(self.valset.iter().map(Target::example));
        t
    }

    fn store(&mut self, records: Vec<EvaluationRecord>) {
        for r in records {
            self.state
                .records
                .entry((r.candidate_id, r.objective_id.clone()))
                .or_insert(r);
        }
    }

    fn train_records(&self, id: CandidateId) -> Vec<EvaluationRecord> {
        self.train_targets()
            .iter()
            .filter_map(|t| self.state.records.get(&(id, t.objective.clone())).cloned())
            .collect()
    }

    /// Evaluates `id` on every full-set target it has no record for yet.
    /// Returns false when the budget cannot cover them (nothing is spent).
    fn complete_evaluation(&mut self, id: CandidateId) -> Result<bool, EngineError> {
        let missing: Vec<Target> = self
            .full_targets()
            .into_iter()
            .filter(|t| !self.state.records.contains_key(&(id, t.objective.clone())))
            .collect();
        let candidate = self.state.candidates[id.0 as usize].clone();
        match self.host.evaluate_full(&candidate, &missing, &mut self.state.budget) {
            Ok(records) => {
                self.store(records);
                Ok(true)
            }
            Err(HostError::BudgetExhausted { needed, remaining }) => {
                log::info!("budget cannot cover evaluation of {id}: needs {needed}, {remaining} left");
                self.state.budget_halt = Some(self.state.budget.max_evaluator_calls);
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn evaluate_seed(&mut self) -> Result<(), EngineError> {
        let seed = CandidateId(0);
        if !self.complete_evaluation(seed)? {
            return Ok(());
        }
        let records = self.train_records(seed);
        let targets: Vec<ObjectiveId> = self.train_targets().into_iter().map(|t| t.objective).collect();
        let mut pareto = ParetoState::new(ParetoState::objectives_for(&targets, &records));
        pareto.update_frontier(&records)?;
        self.state.pareto = Some(pareto);
        Ok(())
    }

    fn log_outcome(&mut self, outcome: &IterationOutcome) -> Result<(), EngineError> {
        self.state.counts.bump(outcome.reason);
        if let Some(sink) = self.trajectory.as_mut() {
            let mut line = serde_json::to_string(outcome).expect("outcome serializes");
            line.push('\n');
            sink.write_all(line.as_bytes())?;
            sink.flush()?;
        }
        Ok(())
    }

    fn minibatch(&mut self) -> Vec<Target> {
        let train = self.train_targets();
        if self.mode == Mode::SingleTask {
            return train;
        }
        let k = self.config.minibatch_size.min(train.len());
        let mut picked = rand::seq::index::sample(&mut self.state.rng, train.len(), k).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| train[i].clone()).collect()
    }

    fn frontier_digest(&self, pareto: &ParetoState, parent: CandidateId) -> Vec<FrontierEntry> {
        let mut others: Vec<(CandidateId, f64)> = pareto
            .nondominated()
            .iter()
            .filter(|id| **id != parent)
            .map(|id| (*id, pareto.aggregate(*id).unwrap_or(f64::NEG_INFINITY)))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        others
            .into_iter()
            .take(self.config.frontier_digest)
            .map(|(id, aggregate)| FrontierEntry {
                candidate_id: id,
                aggregate,
                text: clip_text(
                    &self.state.candidates[id.0 as usize].text,
                    self.config.digest_text_bytes,
                ),
            })
            .collect()
    }

    /// Runs one iteration. Returns `None` when the run is already finished.
    pub fn step(&mut self) -> Result<Option<IterationOutcome>, EngineError> {
        if self.stop_reason().is_some() {
            return Ok(None);
        }
        let Some(pareto) = self.state.pareto.clone() else {
            // Seed still unevaluated and unaffordable.
            return Ok(None);
        };
        let outcome = self.iterate_once(&pareto)?;
        self.log_outcome(&outcome)?;
        if let Some(path) = &self.checkpoint_path {
            if self.state.iteration.is_multiple_of(self.config.checkpoint_every) {
                persist::save_checkpoint(&self.checkpoint(), path)?;
            }
        }
        Ok(Some(outcome))
    }

    fn iterate_once(&mut self, pareto: &ParetoState) -> Result<IterationOutcome, EngineError> {
        self.state.iteration += 1;
        let iteration = self.state.iteration;
        let parent_id = pareto.select_parent(&mut self.state.rng)?;
        let minibatch = self.minibatch();
        let minibatch_example_ids: Vec<String> = minibatch
            .iter()
            .filter_map(|t| t.example.as_ref().map(|e| e.id.clone()))
            .collect();

        let mut entries = Vec::with_capacity(minibatch.len());
        for t in &minibatch {
            let record = self
                .state
                .records
                .get(&(parent_id, t.objective.clone()))
                .ok_or_else(|| {
                    EngineError::Pareto(ParetoError::Inconsistent(format!(
                        "frontier member {parent_id} lacks a record for {}",
                        t.objective
                    )))
                })?;
            entries.push(MinibatchEntry {
                example_id: t.example.as_ref().map(|e| e.id.clone()),
                summary: summary_for(t.example.as_ref()),
                score: record.score.value(),
                side_info: record.side_info.clone(),
            });
        }
        let parent_minibatch_score = mean(entries.iter().map(|e| e.score));
        let mut outcome = IterationOutcome {
            iteration,
            parent_id,
            proposal_id: None,
            accepted: false,
            minibatch_example_ids,
            reason: OutcomeReason::ProposalFailed,
            parent_minibatch_score,
            proposal_minibatch_score: None,
            budget_consumed: self.state.budget.consumed,
            detail: None,
        };

        let context = ReflectionContext {
            parent_text: Some(self.state.candidates[parent_id.0 as usize].text.clone()),
            objective: self.config.objective.clone(),
            background: self.config.background.clone(),
            minibatch: entries,
            frontier_digest: self.frontier_digest(pareto, parent_id),
        };
        let response = match self.proposer.propose(&context) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("iteration {iteration}: {e}");
                outcome.detail = Some(e.to_string());
                return Ok(outcome);
            }
        };
        if let Some(existing) = self.texts.get(&response.refined_text) {
            outcome.reason = OutcomeReason::RejectedDuplicate;
            outcome.detail = Some(format!("same text as candidate {existing}"));
            return Ok(outcome);
        }

        let proposal = Candidate {
            id: CandidateId(self.state.candidates.len() as u64),
            text: response.refined_text,
            parent_id: Some(parent_id),
            origin: if response.refiner_applied {
                Origin::Refined
            } else {
                Origin::Mutation
            },
            created_at_iteration: iteration,
        };
        let records = match self.host.evaluate_full(&proposal, &minibatch, &mut self.state.budget) {
            Ok(records) => records,
            Err(HostError::BudgetExhausted { needed, remaining }) => {
                self.state.budget_halt = Some(self.state.budget.max_evaluator_calls);
                outcome.reason = OutcomeReason::BudgetExhausted;
                outcome.detail = Some(format!("minibatch needs {needed} calls, {remaining} left"));
                return Ok(outcome);
            }
            Err(e) => return Err(e.into()),
        };
        let proposal_id = proposal.id;
        let proposal_score = mean(records.iter().map(|r| r.score.value()));
        self.add_candidate(proposal);
        self.store(records);
        outcome.proposal_id = Some(proposal_id);
        outcome.proposal_minibatch_score = Some(proposal_score);

        let improved = match self.config.acceptance {
            Acceptance::StrictImprovement => proposal_score > parent_minibatch_score,
        };
        if !improved {
            outcome.reason = OutcomeReason::RejectedNoImprovement;
            outcome.budget_consumed = self.state.budget.consumed;
            return Ok(outcome);
        }
        let complete = self.complete_evaluation(proposal_id)?;
        outcome.budget_consumed = self.state.budget.consumed;
        if !complete {
            outcome.reason = OutcomeReason::BudgetExhausted;
            outcome.detail = Some("full evaluation not affordable".into());
            return Ok(outcome);
        }
        let records = self.train_records(proposal_id);
        self.state
            .pareto
            .as_mut()
            .expect("frontier exists once the seed is evaluated")
            .update_frontier(&records)?;
        outcome.accepted = true;
        outcome.reason = OutcomeReason::Accepted;
        Ok(outcome)
    }

    /// Iterates until the budget or the iteration cap stops the run, then
    /// writes a final checkpoint when a path is set.
    pub fn run(&mut self) -> Result<OptimizationResult, EngineError> {
        while self.step()?.is_some() {}
        if let Some(path) = &self.checkpoint_path {
            persist::save_checkpoint(&self.checkpoint(), path)?;
        }
        Ok(self.result())
    }

    pub fn checkpoint(&self) -> RunCheckpoint {
        RunCheckpoint {
            schema_version: SCHEMA_VERSION,
            template_id: TEMPLATE_ID.to_string(),
            engine_config: self.config.clone(),
            mode: self.mode,
            evaluator: self.host.identity().clone(),
            dataset: self.dataset.clone(),
            valset: self.valset.clone(),
            candidates: self.state.candidates.clone(),
            records: self.state.records.values().cloned().collect(),
            pareto: self.state.pareto.clone(),
            rng: self.state.rng.clone(),
            budget: self.state.budget,
            iteration: self.state.iteration,
            counts: self.state.counts,
            budget_halt: self.state.budget_halt,
        }
    }

    fn val_scores(&self, id: CandidateId) -> BTreeMap<String, f64> {
        self.valset
            .iter()
            .filter_map(|e| {
                self.state
                    .records
                    .get(&(id, ObjectiveId::Example(e.id.clone())))
                    .map(|r| (e.id.clone(), r.score.value()))
            })
            .collect()
    }

    fn val_aggregate(&self, id: CandidateId) -> Option<f64> {
        let scores = self.val_scores(id);
        (!self.valset.is_empty() && scores.len() == self.valset.len()).then(|| mean(scores.into_values()))
    }

    fn summarize(&self, id: CandidateId) -> CandidateSummary {
        let c = &self.state.candidates[id.0 as usize];
        let pareto = self.state.pareto.as_ref();
        let scores = pareto
            .and_then(|p| p.scores(id).map(|v| (p, v)))
            .map(|(p, v)| p.objectives().iter().zip(v).map(|(o, s)| (o.to_string(), *s)).collect())
            .unwrap_or_default();
        CandidateSummary {
            id,
            text: c.text.clone(),
            origin: c.origin,
            parent_id: c.parent_id,
            aggregate: pareto.and_then(|p| p.aggregate(id)),
            scores,
            val_aggregate: self.val_aggregate(id),
            val_scores: self.val_scores(id),
        }
    }

    /// Generalization-mode best: highest validation mean among fully
    /// evaluated candidates, ties to the lowest id.
    fn best_by_val(&self, pareto: &ParetoState) -> CandidateId {
        let mut best: Option<(CandidateId, f64)> = None;
        for (id, _) in pareto.rows() {
            let v = self.val_aggregate(id).unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((id, v));
            }
        }
        best.expect("frontier has rows").0
    }

    pub fn result(&self) -> OptimizationResult {
        let seed = CandidateId(0);
        let best = match (self.mode, &self.state.pareto) {
            (Mode::MultiTask, pareto) => BestSelection::PerTask(
                self.dataset
                    .iter()
                    .map(|e| {
                        let id = pareto
                            .as_ref()
                            .and_then(|p| p.best_candidate(Some(&ObjectiveId::Example(e.id.clone()))).ok())
                            .unwrap_or(seed);
                        (e.id.clone(), self.summarize(id))
                    })
                    .collect(),
            ),
            (Mode::Generalization, Some(p)) => BestSelection::Single(self.summarize(self.best_by_val(p))),
            (_, Some(p)) => BestSelection::Single(self.summarize(p.best_candidate(None).unwrap_or(seed))),
            (_, None) => BestSelection::Single(self.summarize(seed)),
        };
        let accepted = self
            .state
            .pareto
            .as_ref()
            .map(|p| {
                self.state
                    .candidates
                    .iter()
                    .filter(|c| c.parent_id.is_some() && p.contains(c.id))
                    .map(|c| LineageStep {
                        iteration: c.created_at_iteration,
                        candidate_id: c.id,
                        parent_id: c.parent_id.expect("filtered"),
                        aggregate: p.aggregate(c.id).expect("on frontier"),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let frontier = self
            .state
            .pareto
            .clone()
            .unwrap_or_else(|| ParetoState::new(Vec::new()));
        OptimizationResult {
            schema_version: SCHEMA_VERSION,
            mode: self.mode,
            best,
            objectives: frontier.objectives().to_vec(),
            frontier,
            trajectory: TrajectorySummary {
                iterations: self.state.iteration,
                counts: self.state.counts,
                candidates: self.state.candidates.len() as u64,
                accepted,
            },
            budget: self.state.budget,
        }
    }

    /// Best aggregate seen after each iteration: the validation mean in
    /// generalization mode, the search-objective mean otherwise.
    pub fn plot_series(&self) -> Vec<(u64, f64)> {
        let Some(pareto) = &self.state.pareto else {
            return Vec::new();
        };
        let mut by_iteration: Vec<(u64, f64)> = pareto
            .rows()
            .map(|(id, _)| {
                let value = if self.mode == Mode::Generalization {
                    self.val_aggregate(id).unwrap_or(f64::NEG_INFINITY)
                } else {
                    pareto.aggregate(id).unwrap_or(f64::NEG_INFINITY)
                };
                (self.state.candidates[id.0 as usize].created_at_iteration, value)
            })
            .collect();
        by_iteration.sort_by_key(|(it, _)| *it);
        let mut out = Vec::with_capacity(self.state.iteration as usize);
        let mut best = f64::NEG_INFINITY;
        let mut rows = by_iteration.into_iter().peekable();
        for it in 1..=self.state.iteration {
            while let Some((_, v)) = rows.next_if(|(created, _)| *created <= it) {
                best = best.max(v);
            }
            out.push((it, best));
        }
        out
    }

    pub fn plot_csv(&self) -> String {
        let mut out = String::from("iteration,best_aggregate\n");
        for (it, v) in self.plot_series() {
            out.push_str(&format!("{it},{v}\n"));
        }
        out
    }
}

/// Asks the proposer for a first candidate from the objective alone.
pub fn bootstrap_seed(config: &EngineConfig, proposer: &mut Proposer) -> Result<Candidate, EngineError> {
    assert!(
        config.seed.is_none(),
        "bootstrap requested although a seed is configured"
    );
    let objective = config
        .objective
        .clone()
        .filter(|o| !o.trim().is_empty())
        .ok_or_else(|| EngineError::Config("seedless runs need a non-empty objective".into()))?;
    let ctx = ReflectionContext::bootstrap(objective, config.background.clone());
    let response = proposer.propose(&ctx).map_err(EngineError::Bootstrap)?;
    Ok(Candidate::root(
        CandidateId(0),
        response.refined_text,
        Origin::Bootstrap,
    ))
}

/// Builds an engine and runs it to completion.
pub fn run(
    config: EngineConfig,
    host: EvaluationHost,
    proposer: Proposer,
    dataset: Option<Vec<Example>>,
    valset: Option<Vec<Example>>,
) -> Result<OptimizationResult, EngineError> {
    Engine::new(config, host, proposer, dataset, valset)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_text_clipping() {
        assert_eq!(clip_text("short", 10), "short");
        assert_eq!(clip_text("abcdef", 3), "abc\n[... 3 more bytes]");
        // Never splits a multi-byte char.
        assert_eq!(clip_text("a\u{e9}b", 2), "a\n[... 3 more bytes]");
    }
}
