//! Patient-trial matching: a cheap relevance gate on the single best page,
//! then one retrieval-augmented assessment per criterion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::gateway::schema::AssessmentResponse;
use crate::gateway::{Gateway, GatewayError, ModelRequest, ModelRole, StructuredOutput, UsageRecord};
use crate::ids::derived_id;
use crate::model::{CriterionAssessment, EligibilityCriterion, PatientRecord, RetrievalStrategy, Trial, Verdict};
use crate::par;
use crate::prompts::{self, TemplateError};
use crate::store::{SearchHit, StoreError, VectorStore};

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("relevance check failed: {0}")]
    Relevance(#[source] GatewayError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResult {
    pub patient_id: String,
    pub trial_id: String,
    pub relevant: bool,
    pub rationale: String,
    /// Top-1 page for the relevance criterion; absent when the patient has no pages.
    pub checked_page_id: Option<String>,
    pub usage: UsageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageSelection {
    pub strategy: RetrievalStrategy,
    /// De-duplicated, in document order.
    pub selected_page_ids: Vec<String>,
    /// Retrieval query (guideline, or the description for flat top-k) to its hits.
    pub per_guideline_hits: BTreeMap<String, Vec<SearchHit>>,
    pub usage: UsageRecord,
}

/// An assessment that could not be produced because of an infrastructure
/// failure. Kept apart from `Unknown`, which is a clinical outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionFailure {
    pub criterion_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRun {
    pub patient_id: String,
    pub trial_id: String,
    pub strategy: RetrievalStrategy,
    pub as_of_date: NaiveDate,
    pub relevance: RelevanceResult,
    /// Ordered by criterion id.
    pub assessments: Vec<CriterionAssessment>,
    pub failures: Vec<CriterionFailure>,
    /// Pages sent to the assessor, per criterion id.
    pub images_used: BTreeMap<String, usize>,
}

impl MatchRun {
    pub fn average_images_used(&self) -> Option<f64> {
        (!self.images_used.is_empty())
            .then(|| self.images_used.values().sum::<usize>() as f64 / self.images_used.len() as f64)
    }
}

/// Everything needed to match one patient.
#[derive(Clone, Copy)]
pub struct Matcher<'a> {
    pub gateway: &'a Gateway,
    pub store: &'a VectorStore,
    pub record: &'a PatientRecord,
    pub workers: usize,
}

const NO_PAGES: &str = "no pages";

impl<'a> Matcher<'a> {
    pub fn new(gateway: &'a Gateway, store: &'a VectorStore, record: &'a PatientRecord) -> Self {
        Matcher { gateway, store, record, workers: par::default_workers() }
    }

    fn images(&self, page_ids: &[String]) -> Result<Vec<Arc<Vec<u8>>>, MatchError> {
        page_ids
            .iter()
            .map(|id| {
                self.record.page(id).map(|p| Arc::new(p.image_bytes.clone())).ok_or_else(|| {
                    MatchError::Precondition(format!("page {id} is in the store but not in the patient record"))
                })
            })
            .collect()
    }

    /// Embeds the trial's relevance criterion, takes the single best page and
    /// asks the relevance-check model whether the patient is relevant.
    pub fn relevance_check(&self, trial: &Trial, as_of: NaiveDate) -> Result<RelevanceResult, MatchError> {
        let criterion =
            trial.relevance_criterion.as_deref().filter(|c| !c.trim().is_empty()).ok_or_else(|| {
                MatchError::Precondition(format!("trial {} has no relevance criterion", trial.trial_id))
            })?;
        let mut result = RelevanceResult {
            patient_id: self.record.patient_id.clone(),
            trial_id: trial.trial_id.clone(),
            relevant: false,
            rationale: NO_PAGES.into(),
            checked_page_id: None,
            usage: UsageRecord::default(),
        };
        if self.store.page_ids(&self.record.patient_id).is_empty() {
            return Ok(result);
        }
        let (query, usage) = self.gateway.embed_query(criterion).map_err(MatchError::Relevance)?;
        result.usage.add(&usage);
        let Some(top) = self.store.search_top_k(&self.record.patient_id, &query, 1)?.into_iter().next() else {
            return Ok(result);
        };
        let images = self.images(std::slice::from_ref(&top.page_id))?;
        let request = assessor_request(ModelRole::RelevanceCheck, criterion, as_of, &images)?;
        let done = self.gateway.complete::<AssessmentResponse>(&request).map_err(MatchError::Relevance)?;
        result.usage.add(&done.usage);
        result.relevant = done.value.is_met && !done.value.insufficient_information;
        result.rationale = done.value.rationale;
        result.checked_page_id = Some(top.page_id);
        Ok(result)
    }

    /// Chooses the pages sent to the assessor for one criterion.
    pub fn select_pages(
        &self,
        criterion: &EligibilityCriterion,
        strategy: RetrievalStrategy,
    ) -> Result<PageSelection, MatchError> {
        if !strategy.is_valid() {
            return Err(MatchError::Precondition(format!("invalid strategy {strategy}")));
        }
        let patient = &self.record.patient_id;
        let mut selection = PageSelection {
            strategy,
            selected_page_ids: Vec::new(),
            per_guideline_hits: BTreeMap::new(),
            usage: UsageRecord::default(),
        };
        let stored: HashSet<String> = self.store.page_ids(patient).into_iter().collect();
        let queries: Vec<String> = match strategy {
            RetrievalStrategy::AllPages => {
                selection.selected_page_ids = self
                    .record
                    .pages
                    .iter()
                    .filter(|p| stored.contains(&p.page_id))
                    .map(|p| p.page_id.clone())
                    .collect();
                return Ok(selection);
            }
            RetrievalStrategy::TopKFlat { .. } => vec![criterion.description.clone()],
            // Without guidelines the description itself is the only query.
            RetrievalStrategy::TopKPerGuideline { .. } if criterion.guidelines.is_empty() => {
                vec![criterion.description.clone()]
            }
            RetrievalStrategy::TopKPerGuideline { .. } => criterion.guidelines.clone(),
        };
        if stored.is_empty() {
            return Ok(selection);
        }
        let k = strategy.k().unwrap_or(1) as usize;
        let batch = self.gateway.embed_texts(&queries)?;
        selection.usage.add(&batch.usage);
        let mut chosen = HashSet::new();
        for (query, vector) in queries.into_iter().zip(batch.items) {
            let vector =
                vector.map_err(|e| GatewayError::BadEmbedding { role: ModelRole::Embedder, message: e.to_string() })?;
            let hits = self.store.search_top_k(patient, &vector, k)?;
            chosen.extend(hits.iter().map(|h| h.page_id.clone()));
            selection.per_guideline_hits.entry(query).or_default().extend(hits);
        }
        let order = self.record.document_order();
        let mut ids: Vec<String> = chosen.into_iter().collect();
        ids.sort_by_key(|id| (order.get(id.as_str()).copied().unwrap_or(usize::MAX), id.clone()));
        selection.selected_page_ids = ids;
        Ok(selection)
    }

    /// Runs the assessor on the selected pages. An empty selection yields
    /// `Unknown` without a model call.
    pub fn assess_criterion(
        &self,
        trial: &Trial,
        criterion: &EligibilityCriterion,
        selection: &PageSelection,
        as_of: NaiveDate,
    ) -> Result<CriterionAssessment, MatchError> {
        let assessment_id = derived_id(
            "asm",
            &[
                self.record.patient_id.as_bytes(),
                trial.trial_id.as_bytes(),
                criterion.criterion_id.as_bytes(),
                selection.strategy.to_string().as_bytes(),
                as_of.to_string().as_bytes(),
            ],
        );
        let mut assessment = CriterionAssessment {
            assessment_id,
            patient_id: self.record.patient_id.clone(),
            trial_id: trial.trial_id.clone(),
            criterion_id: criterion.criterion_id.clone(),
            verdict: Verdict::Unknown,
            rationale: String::new(),
            source_page_ids: Vec::new(),
            as_of_date: as_of,
            usage: selection.usage,
            strategy: selection.strategy,
        };
        if selection.selected_page_ids.is_empty() {
            return Ok(assessment);
        }
        let images = self.images(&selection.selected_page_ids)?;
        let request = assessor_request(ModelRole::Assessor, &criterion.description, as_of, &images)?;
        let done = self.gateway.complete::<AssessmentResponse>(&request)?;
        assessment.usage.add(&done.usage);
        assessment.verdict = verdict_of(&done.value);
        assessment.rationale = done.value.rationale;
        assessment.source_page_ids = selection.selected_page_ids.clone();
        Ok(assessment)
    }

    /// Relevance gate, then every criterion of the trial. Criterion-level
    /// failures are recorded and do not stop the run.
    pub fn assess_patient_trial(
        &self,
        trial: &Trial,
        strategy: RetrievalStrategy,
        as_of: NaiveDate,
    ) -> Result<MatchRun, MatchError> {
        if trial.criteria.is_empty() {
            return Err(MatchError::Precondition(format!(
                "trial {} has no criteria; run trial prep first",
                trial.trial_id
            )));
        }
        let relevance = self.relevance_check(trial, as_of)?;
        Ok(self.assess_criteria(trial, strategy, as_of, relevance))
    }

    /// Every criterion of the trial without the relevance gate, for cohorts
    /// that are already known to be in scope.
    pub fn assess_ungated(
        &self,
        trial: &Trial,
        strategy: RetrievalStrategy,
        as_of: NaiveDate,
    ) -> Result<MatchRun, MatchError> {
        if trial.criteria.is_empty() {
            return Err(MatchError::Precondition(format!("trial {} has no criteria", trial.trial_id)));
        }
        let relevance = RelevanceResult {
            patient_id: self.record.patient_id.clone(),
            trial_id: trial.trial_id.clone(),
            relevant: true,
            rationale: "relevance gate not applied".into(),
            checked_page_id: None,
            usage: UsageRecord::default(),
        };
        Ok(self.assess_criteria(trial, strategy, as_of, relevance))
    }

    fn assess_criteria(
        &self,
        trial: &Trial,
        strategy: RetrievalStrategy,
        as_of: NaiveDate,
        relevance: RelevanceResult,
    ) -> MatchRun {
        let mut run = MatchRun {
            patient_id: self.record.patient_id.clone(),
            trial_id: trial.trial_id.clone(),
            strategy,
            as_of_date: as_of,
            relevance,
            assessments: Vec::new(),
            failures: Vec::new(),
            images_used: BTreeMap::new(),
        };
        if !run.relevance.relevant {
            return run;
        }
        let mut criteria: Vec<&EligibilityCriterion> = trial.criteria.iter().collect();
        criteria.sort_by(|a, b| a.criterion_id.cmp(&b.criterion_id));
        let results = par::map(&criteria, self.workers.max(1), |criterion| {
            let selection = self.select_pages(criterion, strategy)?;
            let used = selection.selected_page_ids.len();
            self.assess_criterion(trial, criterion, &selection, as_of).map(|a| (a, used))
        });
        for (criterion, result) in criteria.iter().zip(results) {
            match result {
                Ok((assessment, used)) => {
                    run.images_used.insert(criterion.criterion_id.clone(), used);
                    run.assessments.push(assessment);
                }
                Err(e) => {
                    tracing::warn!(criterion = %criterion.criterion_id, error = %e, "criterion assessment failed");
                    run.failures
                        .push(CriterionFailure { criterion_id: criterion.criterion_id.clone(), error: e.to_string() });
                }
            }
        }
        run
    }
}

/// `insufficient_information` wins over `is_met`.
pub fn verdict_of(response: &AssessmentResponse) -> Verdict {
    match (response.insufficient_information, response.is_met) {
        (true, _) => Verdict::Unknown,
        (false, true) => Verdict::Met,
        (false, false) => Verdict::Unmet,
    }
}

fn assessor_request(
    role: ModelRole,
    criterion: &str,
    as_of: NaiveDate,
    images: &[Arc<Vec<u8>>],
) -> Result<ModelRequest, MatchError> {
    let system = prompts::assessment_prompt(criterion, as_of)?;
    let mut request = ModelRequest::new(role, AssessmentResponse::SCHEMA_ID, system)
        .text(format!("Medical record pages ({}), in document order:", images.len()));
    for image in images {
        request = request.image(image.clone());
    }
    Ok(request)
}

/// Index of assessments by (patient, trial, criterion).
pub fn index_assessments(assessments: &[CriterionAssessment]) -> HashMap<(&str, &str, &str), &CriterionAssessment> {
    assessments.iter().map(|a| ((a.patient_id.as_str(), a.trial_id.as_str(), a.criterion_id.as_str()), a)).collect()
}
