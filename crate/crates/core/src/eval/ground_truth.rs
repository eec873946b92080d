//! Criterion-level labels derived from reviewer feedback.
//!
//! Rules, applied per (patient, trial, criterion):
//! 1. A direct criterion review sets the label to the reviewer's verdict.
//!    Conflicting reviews resolve to the latest one.
//! 2. If the patient's latest classification is `NotEligible` and the AI
//!    flagged exactly one disqualifying criterion (unmet inclusion or met
//!    exclusion), that criterion's AI verdict is confirmed.
//! 3. If the latest classification is `ToScreen`, every AI verdict of a
//!    met inclusion or unmet exclusion criterion is confirmed.
//! 4. Nothing else is labeled. In particular `Unknown` verdicts under a
//!    `ToScreen` classification stay unlabeled.
//!
//! Rules 2 and 3 only ever confirm AI verdicts; they never invent a label
//! that contradicts one.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{CriterionAssessment, CriterionKind, FeedbackEvent, FeedbackPayload, PatientLabel, Trial, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    DirectCriterionReview,
    InferredFromPatientLabel,
    /// Shipped with a benchmark dataset.
    DatasetAnnotation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub patient_id: String,
    pub trial_id: String,
    pub criterion_id: String,
    pub label: Verdict,
    pub provenance: Provenance,
}

/// Several direct reviews of one criterion disagreed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewConflict {
    pub patient_id: String,
    pub trial_id: String,
    pub criterion_id: String,
    /// Verdicts in timestamp order; the last one was kept.
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Sorted by (patient, trial, criterion).
    pub labels: Vec<GroundTruthLabel>,
    pub conflicts: Vec<ReviewConflict>,
}

type Key = (String, String, String);

/// Whether `verdict` on a criterion of `kind` argues against eligibility.
pub fn is_disqualifying(kind: CriterionKind, verdict: Verdict) -> bool {
    matches!((kind, verdict), (CriterionKind::Inclusion, Verdict::Unmet) | (CriterionKind::Exclusion, Verdict::Met))
}

/// Whether `verdict` on a criterion of `kind` is consistent with eligibility.
pub fn is_qualifying(kind: CriterionKind, verdict: Verdict) -> bool {
    matches!((kind, verdict), (CriterionKind::Inclusion, Verdict::Met) | (CriterionKind::Exclusion, Verdict::Unmet))
}

pub fn infer_ground_truth(
    trials: &[Trial],
    assessments: &[CriterionAssessment],
    events: &[FeedbackEvent],
) -> GroundTruth {
    let kinds: HashMap<(&str, &str), CriterionKind> = trials
        .iter()
        .flat_map(|t| t.criteria.iter().map(move |c| ((t.trial_id.as_str(), c.criterion_id.as_str()), c.kind)))
        .collect();

    let mut ordered: Vec<&FeedbackEvent> = events.iter().collect();
    ordered.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.event_id.cmp(&b.event_id)));

    let mut reviews: BTreeMap<Key, Vec<Verdict>> = BTreeMap::new();
    let mut classification: BTreeMap<(String, String), PatientLabel> = BTreeMap::new();
    for event in ordered {
        match &event.payload {
            FeedbackPayload::CriterionReview { criterion_id, human_verdict } => reviews
                .entry((event.patient_id.clone(), event.trial_id.clone(), criterion_id.clone()))
                .or_default()
                .push(*human_verdict),
            FeedbackPayload::PatientClassification { label } => {
                classification.insert((event.patient_id.clone(), event.trial_id.clone()), *label);
            }
        }
    }

    let mut labels: BTreeMap<Key, GroundTruthLabel> = BTreeMap::new();
    let mut conflicts = Vec::new();
    for ((patient_id, trial_id, criterion_id), verdicts) in reviews {
        let latest = *verdicts.last().expect("at least one review");
        if verdicts.iter().any(|v| *v != latest) {
            tracing::warn!(%patient_id, %trial_id, %criterion_id, ?verdicts, "conflicting criterion reviews; latest wins");
            conflicts.push(ReviewConflict {
                patient_id: patient_id.clone(),
                trial_id: trial_id.clone(),
                criterion_id: criterion_id.clone(),
                verdicts,
            });
        }
        let key = (patient_id.clone(), trial_id.clone(), criterion_id.clone());
        labels.insert(
            key,
            GroundTruthLabel {
                patient_id,
                trial_id,
                criterion_id,
                label: latest,
                provenance: Provenance::DirectCriterionReview,
            },
        );
    }

    // AI verdicts per pair; a later assessment of the same criterion replaces an earlier one.
    let mut by_pair: BTreeMap<(String, String), BTreeMap<String, Verdict>> = BTreeMap::new();
    for a in assessments {
        by_pair
            .entry((a.patient_id.clone(), a.trial_id.clone()))
            .or_default()
            .insert(a.criterion_id.clone(), a.verdict);
    }

    for ((patient_id, trial_id), label) in &classification {
        let Some(verdicts) = by_pair.get(&(patient_id.clone(), trial_id.clone())) else { continue };
        let kind_of = |c: &str| kinds.get(&(trial_id.as_str(), c)).copied();
        let confirmed: Vec<(&String, Verdict)> = match label {
            PatientLabel::NotEligible => {
                let disqualifying: Vec<(&String, Verdict)> = verdicts
                    .iter()
                    .filter(|(c, v)| kind_of(c).is_some_and(|k| is_disqualifying(k, **v)))
                    .map(|(c, v)| (c, *v))
                    .collect();
                if disqualifying.len() == 1 {
                    disqualifying
                } else {
                    Vec::new()
                }
            }
            PatientLabel::ToScreen => verdicts
                .iter()
                .filter(|(c, v)| kind_of(c).is_some_and(|k| is_qualifying(k, **v)))
                .map(|(c, v)| (c, *v))
                .collect(),
        };
        for (criterion_id, verdict) in confirmed {
            labels.entry((patient_id.clone(), trial_id.clone(), criterion_id.clone())).or_insert_with(|| {
                GroundTruthLabel {
                    patient_id: patient_id.clone(),
                    trial_id: trial_id.clone(),
                    criterion_id: criterion_id.clone(),
                    label: verdict,
                    provenance: Provenance::InferredFromPatientLabel,
                }
            });
        }
    }

    GroundTruth { labels: labels.into_values().collect(), conflicts }
}
