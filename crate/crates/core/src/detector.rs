//! Performance-delta scoring of groups and the cumulative ledger that drives eviction.
//!
//! Each group's recovered sum is tentatively applied to the global model and
//! scored by the accuracy change on a server-held validation set:
//!
//! | change                 | score |
//! |------------------------|-------|
//! | `pre - post > tau`     | -1    |
//! | `post - pre > tau`     | +1    |
//! | otherwise (incl. `= tau`) | 0  |
//!
//! A `-1` group is rolled back. All three members get the same score; a
//! client whose running total drops strictly below the eviction bound is
//! removed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::{Dataset, LearningError, Model};
use crate::protocol::{ClientId, Group};
use crate::vector::GradientVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("client {0} was already evicted")]
    Evicted(ClientId),
    #[error("client {0} is not registered in the ledger")]
    UnknownClient(ClientId),
    #[error("score {score} does not follow from pre={pre} post={post} tau={tau}")]
    InconsistentScore {
        score: i8,
        pre: f64,
        post: f64,
        tau: f64,
    },
    #[error("tau must be positive, got {0}")]
    InvalidTau(f64),
    #[error("member count must be positive")]
    NoMembers,
    #[error(transparent)]
    Learning(#[from] LearningError),
}

/// Three-case rule; `|post - pre| == tau` scores 0.
pub fn score_group(pre_acc: f64, post_acc: f64, tau: f64) -> i8 {
    if pre_acc - post_acc > tau {
        -1
    } else if post_acc - pre_acc > tau {
        1
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub pre_acc: f64,
    pub post_acc: f64,
    pub score: i8,
    /// `score != -1`
    pub accepted: bool,
}

/// Applies `group_gradient / member_count` to `model`, scores the accuracy
/// change on `validation`, and returns the updated model, or the untouched
/// input on a `-1`.
pub fn probe_and_apply(
    model: &Model,
    group_gradient: &GradientVector,
    member_count: usize,
    validation: &Dataset,
    tau: f64,
) -> Result<(Model, ProbeOutcome), DetectorError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(DetectorError::InvalidTau(tau));
    }
    if member_count == 0 {
        return Err(DetectorError::NoMembers);
    }
    let pre_acc = model.evaluate(validation)?;
    let candidate = model.apply_update(&group_gradient.scale(1.0 / member_count as f64))?;
    let post_acc = candidate.evaluate(validation)?;
    let score = score_group(pre_acc, post_acc, tau);
    let accepted = score != -1;
    let outcome = ProbeOutcome {
        pre_acc,
        post_acc,
        score,
        accepted,
    };
    Ok((if accepted { candidate } else { model.clone() }, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEvent {
    pub epoch: u32,
    pub group: Group,
    /// `post_acc - pre_acc`
    pub delta: f64,
    pub score: i8,
    pub aggregated: bool,
}

/// Per-client running totals and score history, plus who was evicted when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationLedger {
    tau: f64,
    /// Eviction happens when a total is strictly below this bound.
    thre_eva: i64,
    totals: BTreeMap<ClientId, i64>,
    history: BTreeMap<ClientId, Vec<ScoreEvent>>,
    evicted: BTreeMap<ClientId, u32>,
}

impl EvaluationLedger {
    pub fn new(
        clients: impl IntoIterator<Item = ClientId>,
        tau: f64,
        thre_eva: i64,
    ) -> Result<Self, DetectorError> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(DetectorError::InvalidTau(tau));
        }
        let totals: BTreeMap<_, _> = clients.into_iter().map(|c| (c, 0)).collect();
        let history = totals.keys().map(|&c| (c, Vec::new())).collect();
        Ok(Self {
            tau,
            thre_eva,
            totals,
            history,
            evicted: BTreeMap::new(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn thre_eva(&self) -> i64 {
        self.thre_eva
    }

    pub fn total(&self, id: ClientId) -> Option<i64> {
        self.totals.get(&id).copied()
    }

    pub fn totals(&self) -> &BTreeMap<ClientId, i64> {
        &self.totals
    }

    pub fn history(&self, id: ClientId) -> &[ScoreEvent] {
        self.history.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn is_evicted(&self, id: ClientId) -> bool {
        self.evicted.contains_key(&id)
    }

    /// Evicted clients with the epoch of their eviction.
    pub fn evicted(&self) -> &BTreeMap<ClientId, u32> {
        &self.evicted
    }

    /// Gives every member of `group` the same event for this probe.
    pub fn record_scores(
        &mut self,
        group: &Group,
        epoch: u32,
        outcome: &ProbeOutcome,
    ) -> Result<(), DetectorError> {
        let expected = score_group(outcome.pre_acc, outcome.post_acc, self.tau);
        if expected != outcome.score || outcome.accepted != (outcome.score != -1) {
            return Err(DetectorError::InconsistentScore {
                score: outcome.score,
                pre: outcome.pre_acc,
                post: outcome.post_acc,
                tau: self.tau,
            });
        }
        for id in group.members {
            if self.is_evicted(id) {
                return Err(DetectorError::Evicted(id));
            }
            if !self.totals.contains_key(&id) {
                return Err(DetectorError::UnknownClient(id));
            }
        }
        let event = ScoreEvent {
            epoch,
            group: *group,
            delta: outcome.post_acc - outcome.pre_acc,
            score: outcome.score,
            aggregated: outcome.accepted,
        };
        for id in group.members {
            *self.totals.get_mut(&id).expect("checked") += i64::from(outcome.score);
            self.history
                .get_mut(&id)
                .expect("checked")
                .push(event.clone());
        }
        Ok(())
    }

    /// Marks and returns every not-yet-evicted client whose total is strictly
    /// below the bound, in id order.
    pub fn eviction_sweep(&mut self, epoch: u32) -> Vec<ClientId> {
        let newly: Vec<ClientId> = self
            .totals
            .iter()
            .filter(|(id, &total)| total < self.thre_eva && !self.evicted.contains_key(id))
            .map(|(&id, _)| id)
            .collect();
        for &id in &newly {
            self.evicted.insert(id, epoch);
        }
        newly
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::Architecture;

    fn group(ids: [u32; 3]) -> Group {
        Group {
            epoch: 0,
            index: 0,
            members: ids.map(ClientId),
        }
    }

    fn outcome(pre: f64, post: f64, tau: f64) -> ProbeOutcome {
        let score = score_group(pre, post, tau);
        ProbeOutcome {
            pre_acc: pre,
            post_acc: post,
            score,
            accepted: score != -1,
        }
    }

    #[test]
    fn three_cases() {
        assert_eq!(score_group(0.90, 0.80, 0.05), -1);
        assert_eq!(score_group(0.90, 0.91, 0.05), 0);
        assert_eq!(score_group(0.80, 0.90, 0.05), 1);
        // Exact boundary (representable values) scores 0.
        assert_eq!(score_group(0.75, 0.5, 0.25), 0);
        assert_eq!(score_group(0.5, 0.75, 0.25), 0);
    }

    #[test]
    fn ledger_totals_follow_events() {
        let mut ledger = EvaluationLedger::new((0..6).map(ClientId), 0.05, -6).unwrap();
        let g = group([0, 1, 2]);
        ledger
            .record_scores(&g, 0, &outcome(0.9, 0.91, 0.05))
            .unwrap();
        assert!(ledger.totals().values().all(|&t| t == 0));
        for e in 1..=3 {
            ledger
                .record_scores(&g, e, &outcome(0.9, 0.7, 0.05))
                .unwrap();
        }
        for id in 0..3 {
            assert_eq!(ledger.total(ClientId(id)), Some(-3));
            let replay: i64 = ledger
                .history(ClientId(id))
                .iter()
                .map(|e| i64::from(e.score))
                .sum();
            assert_eq!(replay, -3);
            assert_eq!(ledger.history(ClientId(id)).len(), 4);
        }
        assert_eq!(ledger.total(ClientId(3)), Some(0));
    }

    #[test]
    fn inconsistent_scores_are_rejected() {
        let mut ledger = EvaluationLedger::new((0..3).map(ClientId), 0.05, -6).unwrap();
        let mut bad = outcome(0.9, 0.7, 0.05);
        bad.score = 1;
        assert!(matches!(
            ledger.record_scores(&group([0, 1, 2]), 0, &bad),
            Err(DetectorError::InconsistentScore { .. })
        ));
    }

    #[test]
    fn eviction_is_strict() {
        let mut ledger = EvaluationLedger::new((0..3).map(ClientId), 0.05, -6).unwrap();
        let g = group([0, 1, 2]);
        for e in 0..5 {
            ledger
                .record_scores(&g, e, &outcome(0.9, 0.7, 0.05))
                .unwrap();
        }
        assert!(ledger.eviction_sweep(5).is_empty()); // -5
        ledger
            .record_scores(&g, 6, &outcome(0.9, 0.7, 0.05))
            .unwrap();
        assert!(ledger.eviction_sweep(6).is_empty()); // -6 == bound
        ledger
            .record_scores(&g, 7, &outcome(0.9, 0.7, 0.05))
            .unwrap();
        assert_eq!(
            ledger.eviction_sweep(7),
            (0..3).map(ClientId).collect::<Vec<_>>()
        ); // -7
        assert!(ledger.eviction_sweep(8).is_empty());
        assert_eq!(ledger.evicted()[&ClientId(1)], 7);
        assert_eq!(
            ledger.record_scores(&g, 8, &outcome(0.9, 0.9, 0.05)),
            Err(DetectorError::Evicted(ClientId(0)))
        );
    }

    fn two_class_setup() -> (Model, Dataset) {
        // x > 0 is class 1, x < 0 is class 0.
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let data = Dataset::new(xs.to_vec(), 1, labels, 2).unwrap();
        // W = [[-1], [1]], b = [0, 0]: perfect classifier.
        let model = Model::from_params(
            Architecture::LogisticRegression,
            1,
            2,
            vec![-1.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        (model, data)
    }

    #[test]
    fn zero_gradient_is_accepted_unchanged() {
        let (model, data) = two_class_setup();
        let (out, o) = probe_and_apply(&model, &GradientVector::zeros(4), 3, &data, 0.01).unwrap();
        assert_eq!(o.pre_acc, o.post_acc);
        assert!(o.accepted);
        assert_eq!(out, model);
    }

    #[test]
    fn harmful_gradient_rolls_back_exactly() {
        let (model, data) = two_class_setup();
        // Sign-flipped weights scaled by the member count: the candidate is
        // W = [[1], [-1]], which gets every sample wrong.
        let harmful = GradientVector::new(vec![6.0, -6.0, 0.0, 0.0]).unwrap();
        let (out, o) = probe_and_apply(&model, &harmful, 3, &data, 0.01).unwrap();
        assert_eq!(
            (o.pre_acc, o.post_acc, o.score, o.accepted),
            (1.0, 0.0, -1, false)
        );
        assert_eq!(out.params(), model.params());
        let (again, o2) = probe_and_apply(&out, &harmful, 3, &data, 0.01).unwrap();
        assert_eq!(o, o2);
        assert_eq!(again, model);
    }

    #[test]
    fn probe_rejects_bad_arguments() {
        let (model, data) = two_class_setup();
        let g = GradientVector::zeros(4);
        assert!(probe_and_apply(&model, &g, 0, &data, 0.01).is_err());
        assert!(probe_and_apply(&model, &g, 3, &data, 0.0).is_err());
        assert!(probe_and_apply(&model, &GradientVector::zeros(5), 3, &data, 0.01).is_err());
    }
}
