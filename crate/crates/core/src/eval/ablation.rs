//! Retrieval-strategy comparison: positive-class (`Met`) precision and
//! recall against the average number of pages sent to the assessor.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ground_truth::GroundTruthLabel;
use super::report::{ClassificationReport, ConfusionMatrix};
use crate::matching::MatchRun;
use crate::model::{RetrievalStrategy, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: RetrievalStrategy,
    pub average_images_used: f64,
    pub precision: f64,
    pub recall: f64,
    /// Assessments that have a ground-truth label.
    pub labeled: u64,
    pub assessments: usize,
}

/// One row per strategy, in order of first appearance in `runs`.
pub fn strategy_ablation(runs: &[MatchRun], labels: &[GroundTruthLabel]) -> Vec<AblationRow> {
    let truth: HashMap<(&str, &str, &str), Verdict> = labels
        .iter()
        .map(|l| ((l.patient_id.as_str(), l.trial_id.as_str(), l.criterion_id.as_str()), l.label))
        .collect();
    let mut order: Vec<RetrievalStrategy> = Vec::new();
    for run in runs {
        if !order.contains(&run.strategy) {
            order.push(run.strategy);
        }
    }
    order
        .into_iter()
        .map(|strategy| {
            let group: Vec<&MatchRun> = runs.iter().filter(|r| r.strategy == strategy).collect();
            let images: Vec<usize> = group.iter().flat_map(|r| r.images_used.values().copied()).collect();
            let average_images_used =
                if images.is_empty() { 0.0 } else { images.iter().sum::<usize>() as f64 / images.len() as f64 };
            let mut matrix = ConfusionMatrix::default();
            let mut assessments = 0;
            for a in group.iter().flat_map(|r| &r.assessments) {
                assessments += 1;
                if let Some(label) = truth.get(&(a.patient_id.as_str(), a.trial_id.as_str(), a.criterion_id.as_str())) {
                    matrix.add(*label, a.verdict, 1);
                }
            }
            let report =
                ClassificationReport::from_confusion(&matrix, &Verdict::ALL).expect("all verdicts are classes");
            let met = report.class(Verdict::Met).expect("Met is a class");
            AblationRow {
                strategy,
                average_images_used,
                precision: met.precision,
                recall: met.recall,
                labeled: matrix.total(),
                assessments,
            }
        })
        .collect()
}

/// Plot-ready comma-separated table.
pub fn render_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,average_images_used,precision,recall,labeled,assessments\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.strategy, r.average_images_used, r.precision, r.recall, r.labeled, r.assessments
        );
    }
    out
}
