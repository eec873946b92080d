//! Evaluation: classification reports, ground-truth inference from reviewer
//! feedback, review timing, retrieval ablation and corpus profiling.

pub mod ablation;
pub mod ground_truth;
pub mod n2c2;
pub mod profile;
pub mod report;
pub mod review_time;

use std::collections::HashMap;

use crate::model::{CriterionAssessment, Trial};
use ground_truth::GroundTruthLabel;
use report::EvalRow;

/// Joins assessments with labels and criterion facets. Assessments without
/// a label are skipped; when a criterion was assessed more than once the
/// last assessment in input order is used. Rows are sorted by
/// (patient, trial, criterion).
pub fn join_rows(trials: &[Trial], assessments: &[CriterionAssessment], labels: &[GroundTruthLabel]) -> Vec<EvalRow> {
    let criteria: HashMap<(&str, &str), &crate::model::EligibilityCriterion> = trials
        .iter()
        .flat_map(|t| t.criteria.iter().map(move |c| ((t.trial_id.as_str(), c.criterion_id.as_str()), c)))
        .collect();
    let latest: HashMap<(&str, &str, &str), &CriterionAssessment> = assessments
        .iter()
        .map(|a| ((a.patient_id.as_str(), a.trial_id.as_str(), a.criterion_id.as_str()), a))
        .collect();
    let mut rows: Vec<EvalRow> = labels
        .iter()
        .filter_map(|l| {
            let a = latest.get(&(l.patient_id.as_str(), l.trial_id.as_str(), l.criterion_id.as_str()))?;
            let c = criteria.get(&(l.trial_id.as_str(), l.criterion_id.as_str()));
            Some(EvalRow {
                patient_id: l.patient_id.clone(),
                trial_id: l.trial_id.clone(),
                criterion_id: l.criterion_id.clone(),
                kind: c.map(|c| c.kind),
                domain: c.and_then(|c| c.domain),
                data_format: c.and_then(|c| c.data_format),
                temporal_constraint: c.and_then(|c| c.temporal_constraint),
                label: l.label,
                prediction: a.verdict,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.patient_id, &a.trial_id, &a.criterion_id).cmp(&(&b.patient_id, &b.trial_id, &b.criterion_id))
    });
    rows
}
