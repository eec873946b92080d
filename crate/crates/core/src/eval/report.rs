//! Per-class precision, recall and F1 with accuracy and averages.
//!
//! Conventions: a ratio with a zero denominator is 0. Predictions outside
//! the class set (for example `Unknown` when only met/unmet are scored)
//! count against recall of the true class and are never a true positive.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{CriterionDomain, CriterionKind, DataFormat, TemporalConstraint, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("actual label {0} is not in the class set")]
    ActualOutsideClasses(Verdict),
    #[error("class set is empty")]
    NoClasses,
}

/// Counts indexed by (actual, predicted).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: BTreeMap<(Verdict, Verdict), u64>,
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: &[(Verdict, Verdict)]) -> Self {
        let mut m = ConfusionMatrix::default();
        for (actual, predicted) in pairs {
            m.add(*actual, *predicted, 1);
        }
        m
    }

    pub fn add(&mut self, actual: Verdict, predicted: Verdict, n: u64) {
        *self.counts.entry((actual, predicted)).or_insert(0) += n;
    }

    pub fn get(&self, actual: Verdict, predicted: Verdict) -> u64 {
        self.counts.get(&(actual, predicted)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: Verdict,
    pub true_positives: u64,
    /// Samples predicted as this class.
    pub predicted: u64,
    /// Samples whose actual label is this class.
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub total: u64,
    pub macro_avg: AverageMetrics,
    pub weighted_avg: AverageMetrics,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl ClassificationReport {
    /// Builds the report from confusion counts. Every actual label must be
    /// one of `classes`.
    pub fn from_confusion(matrix: &ConfusionMatrix, classes: &[Verdict]) -> Result<Self, ReportError> {
        if classes.is_empty() {
            return Err(ReportError::NoClasses);
        }
        if let Some((actual, _)) =
            matrix.counts.iter().find(|((a, _), n)| **n > 0 && !classes.contains(a)).map(|(k, _)| *k)
        {
            return Err(ReportError::ActualOutsideClasses(actual));
        }
        let total = matrix.total();
        let metrics: Vec<ClassMetrics> = classes
            .iter()
            .map(|&c| {
                let tp = matrix.get(c, c);
                let predicted: u64 = classes.iter().map(|&a| matrix.get(a, c)).sum();
                let support: u64 = Verdict::ALL.iter().map(|&p| matrix.get(c, p)).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                ClassMetrics {
                    class: c,
                    true_positives: tp,
                    predicted,
                    support,
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                }
            })
            .collect();
        let correct: u64 = metrics.iter().map(|m| m.true_positives).sum();
        let n = metrics.len() as f64;
        let macro_avg = AverageMetrics {
            precision: metrics.iter().map(|m| m.precision).sum::<f64>() / n,
            recall: metrics.iter().map(|m| m.recall).sum::<f64>() / n,
            f1: metrics.iter().map(|m| m.f1).sum::<f64>() / n,
            support: total,
        };
        let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
            if total == 0 {
                0.0
            } else {
                metrics.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64
            }
        };
        let weighted_avg = AverageMetrics {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
            support: total,
        };
        Ok(ClassificationReport { accuracy: ratio(correct, total), total, classes: metrics, macro_avg, weighted_avg })
    }

    pub fn class(&self, class: Verdict) -> Option<&ClassMetrics> {
        self.classes.iter().find(|m| m.class == class)
    }

    /// Aligned text table with values rounded to two decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14}{:>10}{:>10}{:>10}{:>10}", "", "precision", "recall", "f1-score", "support");
        for m in &self.classes {
            let name = m.class.as_str().to_lowercase();
            let _ = writeln!(out, "{name:<14}{:>10.2}{:>10.2}{:>10.2}{:>10}", m.precision, m.recall, m.f1, m.support);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<14}{:>10}{:>10}{:>10.2}{:>10}", "accuracy", "", "", self.accuracy, self.total);
        for (name, avg) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            let _ = writeln!(
                out,
                "{name:<14}{:>10.2}{:>10.2}{:>10.2}{:>10}",
                avg.precision, avg.recall, avg.f1, avg.support
            );
        }
        out
    }

    /// Comma-separated rows: `row,precision,recall,f1,support` at full precision.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("row,precision,recall,f1,support\n");
        for m in &self.classes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.class.as_str().to_lowercase(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        let _ = writeln!(out, "accuracy,,,{},{}", self.accuracy, self.total);
        for (name, avg) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            let _ = writeln!(out, "{name},{},{},{},{}", avg.precision, avg.recall, avg.f1, avg.support);
        }
        out
    }
}

/// Report over (actual, predicted) pairs.
pub fn classification_report(
    pairs: &[(Verdict, Verdict)],
    classes: &[Verdict],
) -> Result<ClassificationReport, ReportError> {
    ClassificationReport::from_confusion(&ConfusionMatrix::from_pairs(pairs), classes)
}

/// One labeled, predicted criterion with the facets used for subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub patient_id: String,
    pub trial_id: String,
    pub criterion_id: String,
    pub kind: Option<CriterionKind>,
    pub domain: Option<CriterionDomain>,
    pub data_format: Option<DataFormat>,
    pub temporal_constraint: Option<TemporalConstraint>,
    pub label: Verdict,
    pub prediction: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subset {
    Kind(CriterionKind),
    Domain(CriterionDomain),
    DataFormat(DataFormat),
    Temporal(TemporalConstraint),
}

impl Subset {
    pub fn matches(&self, row: &EvalRow) -> bool {
        match self {
            Subset::Kind(k) => row.kind == Some(*k),
            Subset::Domain(d) => row.domain == Some(*d),
            Subset::DataFormat(f) => row.data_format == Some(*f),
            Subset::Temporal(t) => row.temporal_constraint == Some(*t),
        }
    }
}

impl FromStr for Subset {
    type Err = String;

    /// `inclusion`, `exclusion`, `domain=<D>`, `data_format=<F>` or `temporal=<T>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            None if s == "inclusion" => Ok(Subset::Kind(CriterionKind::Inclusion)),
            None if s == "exclusion" => Ok(Subset::Kind(CriterionKind::Exclusion)),
            Some(("domain", v)) => v.parse::<CriterionDomain>().map(Subset::Domain).map_err(|e| e.to_string()),
            Some(("data_format", v)) => parse_variant(v).map(Subset::DataFormat),
            Some(("temporal", v)) => parse_variant(v).map(Subset::Temporal),
            _ => Err(format!(
                "unknown subset `{s}`: expected inclusion, exclusion, domain=<D>, data_format=<F> or temporal=<T>"
            )),
        }
    }
}

fn parse_variant<T: serde::de::DeserializeOwned>(v: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(v.to_string())).map_err(|e| e.to_string())
}

pub fn subset_report(
    rows: &[EvalRow],
    subset: Subset,
    classes: &[Verdict],
) -> Result<ClassificationReport, ReportError> {
    let pairs: Vec<(Verdict, Verdict)> =
        rows.iter().filter(|r| subset.matches(r)).map(|r| (r.label, r.prediction)).collect();
    classification_report(&pairs, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub accuracy: f64,
    pub samples: u64,
}

/// Accuracy per group, sorted by group name. Rows without a group value
/// and groups without samples are omitted.
pub fn group_accuracy(rows: &[EvalRow], group_of: impl Fn(&EvalRow) -> Option<String>) -> Vec<GroupAccuracy> {
    let mut groups: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for row in rows {
        if let Some(g) = group_of(row) {
            let entry = groups.entry(g).or_default();
            entry.1 += 1;
            if row.label == row.prediction {
                entry.0 += 1;
            }
        }
    }
    groups
        .into_iter()
        .map(|(group, (correct, samples))| GroupAccuracy { group, accuracy: ratio(correct, samples), samples })
        .collect()
}

pub fn render_group_accuracy(rows: &[GroupAccuracy], heading: &str) -> String {
    let width = rows.iter().map(|r| r.group.len()).chain([heading.len()]).max().unwrap_or(0) + 2;
    let mut out = format!("{heading:<width$}{:>10}{:>10}\n", "accuracy", "samples");
    for r in rows {
        let _ = writeln!(out, "{:<width$}{:>10.2}{:>10}", r.group, r.accuracy, r.samples);
    }
    out
}
