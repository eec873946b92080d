//! In-memory view of a data directory plus the append-only feedback log.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use trialmatch_core::eval::ground_truth::{infer_ground_truth, GroundTruthLabel};
use trialmatch_core::model::{
    CriterionAssessment, FeedbackEvent, FeedbackPayload, PatientLabel, PatientRecord, RedactionPolicy, Trial, Verdict,
};
use trialmatch_core::record;
use trialmatch_core::workspace::{Workspace, WorkspaceError};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Rejected(String),
    #[error("page {0} is not redacted and the record uses a redaction plugin")]
    Unredacted(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error("cannot append feedback: {0}")]
    Append(#[from] record::RecordError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSummary {
    pub patient_id: String,
    pub trial_id: String,
    pub assessments: usize,
    /// Assessed criteria with at least one criterion review.
    pub reviewed: usize,
    pub pending: usize,
    /// Latest patient-level classification, if any.
    pub classification: Option<PatientLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRef {
    pub page_id: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentView {
    #[serde(flatten)]
    pub assessment: CriterionAssessment,
    pub criterion_description: String,
    pub pages: Vec<PageRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAssessments {
    pub patient_id: String,
    pub trial_id: String,
    pub assessments: Vec<AssessmentView>,
}

/// Everything needed to rebuild the labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    /// Timestamp of the newest feedback event, so that identical state
    /// always exports identical bytes.
    pub generated_at: Option<DateTime<Utc>>,
    pub labels: Vec<GroundTruthLabel>,
    pub assessments: Vec<CriterionAssessment>,
    pub feedback_events: Vec<FeedbackEvent>,
}

/// A feedback submission before the server stamps it.
#[derive(Debug, Clone)]
pub struct Submission {
    pub event_id: Option<String>,
    pub actor_id: String,
    pub patient_id: String,
    pub trial_id: String,
    pub payload: FeedbackPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    Stored,
    Duplicate,
}

type PairKey = (String, String);

pub struct ReviewState {
    workspace: Workspace,
    trials: BTreeMap<String, Trial>,
    patients: HashMap<String, PatientRecord>,
    /// page id -> patient id
    page_owner: HashMap<String, String>,
    /// Latest assessment per (patient, trial, criterion), grouped by pair.
    assessments: BTreeMap<PairKey, BTreeMap<String, CriterionAssessment>>,
    events: Vec<FeedbackEvent>,
    event_ids: HashSet<String>,
}

impl ReviewState {
    pub fn load(workspace: Workspace) -> Result<Self, ReviewError> {
        let trials: BTreeMap<String, Trial> =
            workspace.trials()?.into_iter().map(|t| (t.trial_id.clone(), t)).collect();
        let patients: HashMap<String, PatientRecord> =
            workspace.patients()?.into_iter().map(|p| (p.patient_id.clone(), p)).collect();
        let page_owner = patients
            .values()
            .flat_map(|p| p.pages.iter().map(move |pg| (pg.page_id.clone(), p.patient_id.clone())))
            .collect();
        let mut assessments: BTreeMap<PairKey, BTreeMap<String, CriterionAssessment>> = BTreeMap::new();
        for a in workspace.assessments()? {
            assessments
                .entry((a.patient_id.clone(), a.trial_id.clone()))
                .or_default()
                .insert(a.criterion_id.clone(), a);
        }
        let events = workspace.feedback()?;
        let event_ids = events.iter().map(|e| e.event_id.clone()).collect();
        Ok(ReviewState { workspace, trials, patients, page_owner, assessments, events, event_ids })
    }

    pub fn list_pairs(&self) -> Vec<PairSummary> {
        let mut reviewed: HashMap<(&str, &str), BTreeSet<&str>> = HashMap::new();
        let mut classification: HashMap<(&str, &str), PatientLabel> = HashMap::new();
        for event in self.events_in_order() {
            let key = (event.patient_id.as_str(), event.trial_id.as_str());
            match &event.payload {
                FeedbackPayload::CriterionReview { criterion_id, .. } => {
                    reviewed.entry(key).or_default().insert(criterion_id);
                }
                FeedbackPayload::PatientClassification { label } => {
                    classification.insert(key, *label);
                }
            }
        }
        self.assessments
            .iter()
            .map(|((patient_id, trial_id), by_criterion)| {
                let key = (patient_id.as_str(), trial_id.as_str());
                let done =
                    reviewed.get(&key).map_or(0, |set| set.iter().filter(|c| by_criterion.contains_key(**c)).count());
                PairSummary {
                    patient_id: patient_id.clone(),
                    trial_id: trial_id.clone(),
                    assessments: by_criterion.len(),
                    reviewed: done,
                    pending: by_criterion.len() - done,
                    classification: classification.get(&key).copied(),
                }
            })
            .collect()
    }

    pub fn pair_assessments(&self, patient_id: &str, trial_id: &str) -> Result<PairAssessments, ReviewError> {
        let by_criterion = self.assessments.get(&(patient_id.to_string(), trial_id.to_string())).ok_or_else(|| {
            ReviewError::NotFound(format!("no assessments for patient {patient_id} and trial {trial_id}"))
        })?;
        let trial = self.trials.get(trial_id);
        let assessments = by_criterion
            .values()
            .map(|a| AssessmentView {
                criterion_description: trial
                    .and_then(|t| t.criterion(&a.criterion_id))
                    .map(|c| c.description.clone())
                    .unwrap_or_default(),
                pages: a
                    .source_page_ids
                    .iter()
                    .map(|id| PageRef { page_id: id.clone(), url: format!("/pages/{id}.png") })
                    .collect(),
                assessment: a.clone(),
            })
            .collect();
        Ok(PairAssessments { patient_id: patient_id.into(), trial_id: trial_id.into(), assessments })
    }

    /// PNG bytes of a page. Records ingested with a redaction plugin only
    /// ever serve pages that went through it.
    pub fn page_png(&self, page_id: &str) -> Result<Vec<u8>, ReviewError> {
        let not_found = || ReviewError::NotFound(format!("page {page_id} not found"));
        let patient = self.page_owner.get(page_id).and_then(|p| self.patients.get(p)).ok_or_else(not_found)?;
        let page = patient.page(page_id).ok_or_else(not_found)?;
        if patient.redaction != RedactionPolicy::Passthrough && !page.redacted {
            return Err(ReviewError::Unredacted(page_id.to_string()));
        }
        Ok(page.image_bytes.clone())
    }

    fn validate(&self, s: &Submission) -> Result<(), ReviewError> {
        if s.actor_id.trim().is_empty() {
            return Err(ReviewError::Rejected("actor id is empty".into()));
        }
        let trial = self
            .trials
            .get(&s.trial_id)
            .ok_or_else(|| ReviewError::Rejected(format!("unknown trial {}", s.trial_id)))?;
        if !self.patients.contains_key(&s.patient_id) {
            return Err(ReviewError::Rejected(format!("unknown patient {}", s.patient_id)));
        }
        let assessed = self.assessments.get(&(s.patient_id.clone(), s.trial_id.clone()));
        if assessed.is_none() {
            return Err(ReviewError::Rejected(format!(
                "patient {} has no assessments for trial {}",
                s.patient_id, s.trial_id
            )));
        }
        if let FeedbackPayload::CriterionReview { criterion_id, .. } = &s.payload {
            if trial.criterion(criterion_id).is_none() {
                return Err(ReviewError::Rejected(format!(
                    "unknown criterion {criterion_id} for trial {}",
                    s.trial_id
                )));
            }
        }
        Ok(())
    }

    /// Validates, stamps and appends one event. A submission whose event id
    /// is already in the log is acknowledged without being stored again.
    pub fn append(
        &mut self,
        submission: Submission,
        now: DateTime<Utc>,
    ) -> Result<(FeedbackEvent, Appended), ReviewError> {
        if let Some(id) = &submission.event_id {
            if self.event_ids.contains(id) {
                let existing = self.events.iter().find(|e| &e.event_id == id).expect("indexed event").clone();
                return Ok((existing, Appended::Duplicate));
            }
        }
        self.validate(&submission)?;
        let event = FeedbackEvent {
            event_id: submission.event_id.unwrap_or_else(|| uuid::Uuid::now_v7().to_string()),
            actor_id: submission.actor_id,
            timestamp: now,
            patient_id: submission.patient_id,
            trial_id: submission.trial_id,
            payload: submission.payload,
        };
        record::append_jsonl(&self.workspace.feedback_path(), &event)?;
        self.event_ids.insert(event.event_id.clone());
        self.events.push(event.clone());
        Ok((event, Appended::Stored))
    }

    fn events_in_order(&self) -> Vec<&FeedbackEvent> {
        let mut ordered: Vec<&FeedbackEvent> = self.events.iter().collect();
        ordered.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.event_id.cmp(&b.event_id)));
        ordered
    }

    pub fn export(&self) -> ExportBundle {
        let trials: Vec<Trial> = self.trials.values().cloned().collect();
        let assessments: Vec<CriterionAssessment> =
            self.assessments.values().flat_map(|m| m.values().cloned()).collect();
        let feedback_events: Vec<FeedbackEvent> = self.events_in_order().into_iter().cloned().collect();
        let truth = infer_ground_truth(&trials, &assessments, &feedback_events);
        // Keep the bundle self-consistent: only labels whose criterion exists.
        let labels = truth
            .labels
            .into_iter()
            .filter(|l| self.trials.get(&l.trial_id).is_some_and(|t| t.criterion(&l.criterion_id).is_some()))
            .collect();
        ExportBundle { generated_at: feedback_events.last().map(|e| e.timestamp), labels, assessments, feedback_events }
    }
}

/// Body of `POST /feedback`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionReviewBody {
    #[serde(default)]
    pub event_id: Option<String>,
    pub patient_id: String,
    pub trial_id: String,
    pub criterion_id: String,
    pub human_verdict: Verdict,
}

/// Body of `POST /classification`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationBody {
    #[serde(default)]
    pub event_id: Option<String>,
    pub patient_id: String,
    pub trial_id: String,
    pub label: PatientLabel,
}
