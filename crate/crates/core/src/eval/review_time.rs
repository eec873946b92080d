//! Time reviewers spend per patient-trial pair, reconstructed from feedback
//! timestamps.
//!
//! A pair qualifies when at least two distinct criteria were reviewed and
//! the patient was classified afterwards. Its duration runs from the first
//! criterion review to the first classification after it, scaled by
//! N/(N-1) for N reviewed criteria because the first review's own time is
//! not observed. Adjusted durations under one minute or over one hour are
//! dropped.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{FeedbackEvent, FeedbackPayload};
use crate::stats::Distribution;

pub const MIN_SECONDS: f64 = 60.0;
pub const MAX_SECONDS: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReviewTime {
    pub patient_id: String,
    pub trial_id: String,
    pub criteria_reviewed: usize,
    pub raw_seconds: f64,
    pub adjusted_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewTimeStats {
    /// Qualifying pairs inside the duration window, sorted by pair.
    pub pairs: Vec<PairReviewTime>,
    /// Pairs with fewer than two reviewed criteria or no later classification.
    pub not_qualifying: usize,
    pub too_short: usize,
    pub too_long: usize,
    /// Over adjusted durations in seconds; absent when no pair qualifies.
    pub distribution: Option<Distribution>,
}

/// N/(N-1) scaling of a raw span covering N reviewed criteria (N >= 2).
pub fn adjust(raw_seconds: f64, criteria_reviewed: usize) -> f64 {
    let n = criteria_reviewed as f64;
    raw_seconds * n / (n - 1.0)
}

#[derive(Default)]
struct PairEvents {
    criteria: BTreeSet<String>,
    first_review: Option<DateTime<Utc>>,
    classifications: Vec<DateTime<Utc>>,
}

pub fn review_time_stats(events: &[FeedbackEvent]) -> ReviewTimeStats {
    let mut pairs: BTreeMap<(String, String), PairEvents> = BTreeMap::new();
    for event in events {
        let entry = pairs.entry((event.patient_id.clone(), event.trial_id.clone())).or_default();
        match &event.payload {
            FeedbackPayload::CriterionReview { criterion_id, .. } => {
                entry.criteria.insert(criterion_id.clone());
                entry.first_review = Some(entry.first_review.map_or(event.timestamp, |t| t.min(event.timestamp)));
            }
            FeedbackPayload::PatientClassification { .. } => entry.classifications.push(event.timestamp),
        }
    }

    let mut stats = ReviewTimeStats::default();
    for ((patient_id, trial_id), pair) in pairs {
        let n = pair.criteria.len();
        let classified = pair
            .first_review
            .and_then(|start| pair.classifications.iter().filter(|t| **t >= start).min().map(|end| (start, *end)));
        let (Some((start, end)), true) = (classified, n >= 2) else {
            stats.not_qualifying += 1;
            continue;
        };
        let raw_seconds = (end - start).num_milliseconds() as f64 / 1000.0;
        let adjusted_seconds = adjust(raw_seconds, n);
        if adjusted_seconds < MIN_SECONDS {
            stats.too_short += 1;
        } else if adjusted_seconds > MAX_SECONDS {
            stats.too_long += 1;
        } else {
            stats.pairs.push(PairReviewTime {
                patient_id,
                trial_id,
                criteria_reviewed: n,
                raw_seconds,
                adjusted_seconds,
            });
        }
    }
    let samples: Vec<f64> = stats.pairs.iter().map(|p| p.adjusted_seconds).collect();
    stats.distribution = Distribution::from_samples(&samples);
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_limits() {
        assert_eq!(adjust(100.0, 2), 200.0);
        assert_eq!(adjust(600.0, 3), 900.0);
        assert!((adjust(100.0, 1_000_000) - 100.0).abs() < 1e-3);
    }
}
