//! Per-objective Pareto bookkeeping and frequency-proportional parent
//! selection.
//!
//! Each fully evaluated candidate contributes one score vector over a fixed,
//! ordered objective set. The frontier is the nondominated subset; `B[j]` is
//! the set of frontier members attaining the maximum on objective `j`, and a
//! candidate's selection weight is the number of best-sets it belongs to.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{mean, CandidateId, EvaluationRecord, ObjectiveId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParetoError {
    #[error("score vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("score vectors must be nonempty")]
    EmptyVector,
    #[error("non-finite score in vector")]
    NonFinite,
    #[error("candidate {0} is already on record")]
    DuplicateCandidate(CandidateId),
    #[error("records do not cover objective {0}")]
    MissingObjective(ObjectiveId),
    #[error("record for {0} is not part of the objective set")]
    UnexpectedObjective(ObjectiveId),
    #[error("records mix candidates {0} and {1}")]
    MixedCandidates(CandidateId, CandidateId),
    #[error("unknown objective {0}")]
    UnknownObjective(ObjectiveId),
    #[error("no candidate has positive selection weight")]
    NoSelectableParent,
    #[error("frontier is empty")]
    Empty,
    #[error("frontier state is inconsistent: {0}")]
    Inconsistent(String),
}

/// `a` dominates `b`: no worse everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool, ParetoError> {
    if a.len() != b.len() {
        return Err(ParetoError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(ParetoError::EmptyVector);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(ParetoError::NonFinite);
    }
    Ok(dominates_unchecked(a, b))
}

fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoState {
    objectives: Vec<ObjectiveId>,
    scores: BTreeMap<CandidateId, Vec<f64>>,
    nondominated: BTreeSet<CandidateId>,
    best_sets: Vec<BTreeSet<CandidateId>>,
    weights: BTreeMap<CandidateId, u32>,
}

impl ParetoState {
    pub fn new(objectives: Vec<ObjectiveId>) -> Self {
        let best_sets = vec![BTreeSet::new(); objectives.len()];
        Self {
            objectives,
            scores: BTreeMap::new(),
            nondominated: BTreeSet::new(),
            best_sets,
            weights: BTreeMap::new(),
        }
    }

    /// Objective set for a run: the evaluation targets in order, followed by
    /// every sub-score metric reported by the first full evaluation.
    pub fn objectives_for(targets: &[ObjectiveId], first: &[EvaluationRecord]) -> Vec<ObjectiveId> {
        let mut out: Vec<ObjectiveId> = targets.to_vec();
        for record in first {
            for (name, _) in record.side_info.sub_scores() {
                let id = ObjectiveId::Metric(name.clone());
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        }
        out
    }

    pub fn objectives(&self) -> &[ObjectiveId] {
        &self.objectives
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn contains(&self, id: CandidateId) -> bool {
        self.scores.contains_key(&id)
    }

    pub fn scores(&self, id: CandidateId) -> Option<&[f64]> {
        self.scores.get(&id).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (CandidateId, &[f64])> {
        self.scores.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn nondominated(&self) -> &BTreeSet<CandidateId> {
        &self.nondominated
    }

    pub fn best_set(&self, objective: &ObjectiveId) -> Option<&BTreeSet<CandidateId>> {
        let j = self.objectives.iter().position(|o| o == objective)?;
        Some(&self.best_sets[j])
    }

    pub fn weight(&self, id: CandidateId) -> u32 {
        self.weights.get(&id).copied().unwrap_or(0)
    }

    pub fn weights(&self) -> &BTreeMap<CandidateId, u32> {
        &self.weights
    }

    pub fn aggregate(&self, id: CandidateId) -> Option<f64> {
        self.scores.get(&id).map(|v| mean(v.iter().copied()))
    }

    /// Projects one candidate's full evaluation onto the objective vector.
    ///
    /// Target objectives take the record score directly. A metric objective
    /// takes the mean of that sub-score across the records; a failed record
    /// without the metric contributes its (floored) score instead.
    pub fn project(&self, records: &[EvaluationRecord]) -> Result<Vec<f64>, ParetoError> {
        if let Some(first) = records.first() {
            if let Some(other) = records.iter().find(|r| r.candidate_id != first.candidate_id) {
                return Err(ParetoError::MixedCandidates(first.candidate_id, other.candidate_id));
            }
        }
        for r in records {
            if matches!(r.objective_id, ObjectiveId::Metric(_)) || !self.objectives.contains(&r.objective_id) {
                return Err(ParetoError::UnexpectedObjective(r.objective_id.clone()));
            }
        }
        let mut out = Vec::with_capacity(self.objectives.len());
        for objective in &self.objectives {
            match objective {
                ObjectiveId::Metric(name) => {
                    let mut values = Vec::with_capacity(records.len());
                    for r in records {
                        let found = r.side_info.sub_scores().find(|(k, _)| *k == name);
                        match found {
                            Some((_, v)) => values.push(v),
                            None if r.side_info.is_failure() => values.push(r.score.value()),
                            None => return Err(ParetoError::MissingObjective(objective.clone())),
                        }
                    }
                    if values.is_empty() {
                        return Err(ParetoError::MissingObjective(objective.clone()));
                    }
                    out.push(mean(values));
                }
                target => {
                    let mut hits = records.iter().filter(|r| &r.objective_id == target);
                    let record = hits
                        .next()
                        .ok_or_else(|| ParetoError::MissingObjective(target.clone()))?;
                    if hits.next().is_some() {
                        return Err(ParetoError::Inconsistent(format!("duplicate record for {target}")));
                    }
                    out.push(record.score.value());
                }
            }
        }
        Ok(out)
    }

    /// Adds one candidate's full evaluation and recomputes the frontier.
    pub fn update_frontier(&mut self, records: &[EvaluationRecord]) -> Result<(), ParetoError> {
        let id = records.first().ok_or(ParetoError::Empty)?.candidate_id;
        let vector = self.project(records)?;
        self.insert(id, vector)
    }

    /// Adds a raw score vector for `id`.
    pub fn insert(&mut self, id: CandidateId, vector: Vec<f64>) -> Result<(), ParetoError> {
        if vector.len() != self.objectives.len() {
            return Err(ParetoError::LengthMismatch(vector.len(), self.objectives.len()));
        }
        if vector.is_empty() {
            return Err(ParetoError::EmptyVector);
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(ParetoError::NonFinite);
        }
        if self.scores.contains_key(&id) {
            return Err(ParetoError::DuplicateCandidate(id));
        }
        // Dominance is transitive, so checking the current frontier suffices.
        let dominated = self
            .nondominated
            .iter()
            .any(|other| dominates_unchecked(&self.scores[other], &vector));
        if !dominated {
            let scores = &self.scores;
            self.nondominated
                .retain(|other| !dominates_unchecked(&vector, &scores[other]));
            self.nondominated.insert(id);
        }
        self.scores.insert(id, vector);
        self.recompute_best_sets();
        Ok(())
    }

    fn recompute_best_sets(&mut self) {
        for (j, best) in self.best_sets.iter_mut().enumerate() {
            best.clear();
            let top = self
                .nondominated
                .iter()
                .map(|id| self.scores[id][j])
                .fold(f64::NEG_INFINITY, f64::max);
            best.extend(self.nondominated.iter().filter(|id| self.scores[*id][j] == top));
        }
        self.weights = self.scores.keys().map(|id| (*id, 0)).collect();
        for best in &self.best_sets {
            for id in best {
                *self.weights.entry(*id).or_default() += 1;
            }
        }
    }

    /// Samples a parent with probability proportional to its weight.
    pub fn select_parent<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CandidateId, ParetoError> {
        let total: u64 = self.weights.values().map(|w| u64::from(*w)).sum();
        if total == 0 {
            return Err(ParetoError::NoSelectableParent);
        }
        let mut ticket = rng.random_range(0..total);
        for (id, w) in &self.weights {
            let w = u64::from(*w);
            if ticket < w {
                return Ok(*id);
            }
            ticket -= w;
        }
        unreachable!("ticket drawn below total weight")
    }

    /// Frontier member maximizing one objective, or the mean over all
    /// objectives when no filter is given. Ties go to the lowest id.
    pub fn best_candidate(&self, filter: Option<&ObjectiveId>) -> Result<CandidateId, ParetoError> {
        if self.nondominated.is_empty() {
            return Err(ParetoError::Empty);
        }
        let key: Box<dyn Fn(CandidateId) -> f64 + '_> = match filter {
            Some(objective) => {
                let j = self
                    .objectives
                    .iter()
                    .position(|o| o == objective)
                    .ok_or_else(|| ParetoError::UnknownObjective(objective.clone()))?;
                Box::new(move |id| self.scores[&id][j])
            }
            None => Box::new(|id| mean(self.scores[&id].iter().copied())),
        };
        let mut best: Option<(CandidateId, f64)> = None;
        for id in &self.nondominated {
            let v = key(*id);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((*id, v));
            }
        }
        Ok(best.expect("nonempty frontier").0)
    }

    /// Re-derives frontier, best-sets and weights from the score matrix and
    /// checks they match the stored values.
    pub fn validate(&self) -> Result<(), ParetoError> {
        if self.best_sets.len() != self.objectives.len() {
            return Err(ParetoError::Inconsistent("best-set count".into()));
        }
        let mut fresh = ParetoState::new(self.objectives.clone());
        for (id, v) in &self.scores {
            fresh.insert(*id, v.clone())?;
        }
        if fresh != *self {
            return Err(ParetoError::Inconsistent(
                "derived frontier does not match stored frontier".into(),
            ));
        }
        Ok(())
    }

    /// Tab-separated table: id, one column per objective, weight, frontier flag.
    pub fn frontier_dump(&self) -> String {
        let mut out = String::from("candidate_id");
        for o in &self.objectives {
            let _ = write!(out, "\t{o}");
        }
        out.push_str("\tweight\tnondominated\n");
        for (id, v) in &self.scores {
            let _ = write!(out, "{id}");
            for s in v {
                let _ = write!(out, "\t{s}");
            }
            let _ = writeln!(out, "\t{}\t{}", self.weight(*id), self.nondominated.contains(id));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Score, SideInfo, SideInfoValue};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_objectives() -> ParetoState {
        ParetoState::new(vec![
            ObjectiveId::Example("e0".into()),
            ObjectiveId::Example("e1".into()),
        ])
    }

    fn record(id: u64, objective: ObjectiveId, score: f64, si: SideInfo) -> EvaluationRecord {
        EvaluationRecord {
            candidate_id: CandidateId(id),
            objective_id: objective,
            score: Score::new(score).unwrap(),
            side_info: si,
            evaluator_calls: 1,
            wall_time_ms: 0,
            from_cache: false,
        }
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&[1.0, 1.0], &[0.0, 0.0]).unwrap());
        assert!(!dominates(&[1.0, 0.0], &[0.0, 1.0]).unwrap());
        assert!(!dominates(&[1.0, 1.0], &[1.0, 1.0]).unwrap());
        assert_eq!(dominates(&[1.0], &[1.0, 2.0]), Err(ParetoError::LengthMismatch(1, 2)));
    }

    #[test]
    fn singleton_frontier() {
        let mut p = two_objectives();
        p.insert(CandidateId(0), vec![0.5, 0.5]).unwrap();
        assert_eq!(p.nondominated().len(), 1);
        assert_eq!(p.weight(CandidateId(0)), 2);
    }

    #[test]
    fn complementary_specialists() {
        let mut p = two_objectives();
        p.insert(CandidateId(0), vec![1.0, 0.0]).unwrap();
        p.insert(CandidateId(1), vec![0.0, 1.0]).unwrap();
        assert_eq!(p.nondominated().len(), 2);
        assert_eq!(p.weight(CandidateId(0)), 1);
        assert_eq!(p.weight(CandidateId(1)), 1);
        let e0 = ObjectiveId::Example("e0".into());
        assert_eq!(p.best_candidate(Some(&e0)).unwrap(), CandidateId(0));
        assert_eq!(p.best_candidate(None).unwrap(), CandidateId(0));
        assert_eq!(
            p.best_candidate(Some(&ObjectiveId::Scalar)),
            Err(ParetoError::UnknownObjective(ObjectiveId::Scalar))
        );
    }

    #[test]
    fn dominated_candidates_stay_in_history() {
        let mut p = two_objectives();
        p.insert(CandidateId(0), vec![0.2, 0.2]).unwrap();
        p.insert(CandidateId(1), vec![0.3, 0.3]).unwrap();
        assert!(p.contains(CandidateId(0)));
        assert!(!p.nondominated().contains(&CandidateId(0)));
        assert_eq!(p.weight(CandidateId(0)), 0);
        assert_eq!(
            p.insert(CandidateId(1), vec![0.0, 0.0]),
            Err(ParetoError::DuplicateCandidate(CandidateId(1)))
        );
    }

    #[test]
    fn ties_share_best_sets() {
        let mut p = two_objectives();
        p.insert(CandidateId(0), vec![1.0, 0.0]).unwrap();
        p.insert(CandidateId(1), vec![1.0, 0.0]).unwrap();
        let e0 = ObjectiveId::Example("e0".into());
        assert_eq!(p.best_set(&e0).unwrap().len(), 2);
        assert_eq!(p.weight(CandidateId(0)), 2);
    }

    #[test]
    fn weight_zero_is_never_sampled() {
        // C is nondominated but tops nothing.
        let mut p = two_objectives();
        p.insert(CandidateId(0), vec![1.0, 0.0]).unwrap();
        p.insert(CandidateId(1), vec![0.0, 1.0]).unwrap();
        p.insert(CandidateId(2), vec![0.5, 0.5]).unwrap();
        assert!(p.nondominated().contains(&CandidateId(2)));
        assert_eq!(p.weight(CandidateId(2)), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            assert_ne!(p.select_parent(&mut rng).unwrap(), CandidateId(2));
        }
    }

    #[test]
    fn single_parent_always_selected() {
        let mut p = ParetoState::new(vec![
            ObjectiveId::Example("a".into()),
            ObjectiveId::Example("b".into()),
            ObjectiveId::Example("c".into()),
        ]);
        p.insert(CandidateId(7), vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.weight(CandidateId(7)), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(p.select_parent(&mut rng).unwrap(), CandidateId(7));
        }
    }

    #[test]
    fn project_targets_and_metrics() {
        let targets = [ObjectiveId::Example("e0".into()), ObjectiveId::Example("e1".into())];
        let mut si0 = SideInfo::new();
        let mut subs = indexmap::IndexMap::new();
        subs.insert("speed".to_string(), 0.2);
        si0.insert("scores", SideInfoValue::SubScores(subs.clone())).unwrap();
        let mut si1 = SideInfo::new();
        subs.insert("speed".to_string(), 0.6);
        si1.insert("scores", SideInfoValue::SubScores(subs)).unwrap();
        let records = vec![
            record(0, targets[0].clone(), 0.1, si0),
            record(0, targets[1].clone(), 0.3, si1),
        ];
        let objectives = ParetoState::objectives_for(&targets, &records);
        assert_eq!(objectives.len(), 3);
        let mut p = ParetoState::new(objectives);
        let v = p.project(&records).unwrap();
        assert_eq!(v[0], 0.1);
        assert_eq!(v[1], 0.3);
        assert!((v[2] - 0.4).abs() < 1e-15);
        p.update_frontier(&records).unwrap();

        // Partial coverage is rejected.
        let partial = vec![record(1, targets[0].clone(), 0.9, SideInfo::new())];
        assert!(matches!(
            p.update_frontier(&partial),
            Err(ParetoError::MissingObjective(_))
        ));
        // Failed records fall back to their floored score for metrics.
        let failed = vec![
            record(2, targets[0].clone(), 0.0, SideInfo::new().with_text("Error", "boom")),
            record(2, targets[1].clone(), 0.0, SideInfo::new().with_text("Error", "boom")),
        ];
        assert_eq!(p.project(&failed).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn validate_detects_tampering() {
        let mut p = two_objectives();
        p.insert(CandidateId(0), vec![1.0, 0.0]).unwrap();
        p.insert(CandidateId(1), vec![0.0, 1.0]).unwrap();
        p.validate().unwrap();
        let mut bad = p.clone();
        bad.weights.insert(CandidateId(0), 5);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dump_has_one_row_per_candidate() {
        let mut p = two_objectives();
        p.insert(CandidateId(0), vec![1.0, 0.0]).unwrap();
        p.insert(CandidateId(1), vec![0.5, 0.0]).unwrap();
        let dump = p.frontier_dump();
        let lines: Vec<_> = dump.lines().collect();
        assert_eq!(lines[0], "candidate_id\texample:e0\texample:e1\tweight\tnondominated");
        assert_eq!(lines[1], "0\t1\t0\t2\ttrue");
        assert_eq!(lines[2], "1\t0.5\t0\t0\tfalse");
    }
}
