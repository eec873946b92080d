//! Trial preparation: split the criteria block, derive the relevance
//! criterion, generate retrieval guidelines and classify each criterion.

use crate::gateway::schema::{
    DataFormatResponse, DomainResponse, GuidelinesResponse, RelevanceCriterionResponse, SplitCriteriaResponse,
    TemporalResponse,
};
use crate::gateway::{Gateway, GatewayError, ModelRequest, ModelRole, StructuredOutput, UsageRecord};
use crate::model::{CriterionDomain, CriterionKind, DataFormat, EligibilityCriterion, TemporalConstraint, Trial};
use crate::prompts::{self, TemplateError};

#[derive(Debug, thiserror::Error)]
pub enum PrepError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("the splitter returned zero criteria")]
    NoCriteria,
    #[error("{stage} failed{}: {source}", criterion.as_ref().map(|c| format!(" for criterion {c}")).unwrap_or_default())]
    Gateway {
        stage: &'static str,
        criterion: Option<String>,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Facet {
    Domain,
    DataFormat,
    Temporal,
}

impl Facet {
    pub const ALL: [Facet; 3] = [Facet::Domain, Facet::DataFormat, Facet::Temporal];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FacetValue {
    Domain(CriterionDomain),
    DataFormat(DataFormat),
    Temporal(TemporalConstraint),
}

impl FacetValue {
    pub fn apply(self, criterion: &mut EligibilityCriterion) {
        match self {
            FacetValue::Domain(d) => criterion.domain = Some(d),
            FacetValue::DataFormat(f) => criterion.data_format = Some(f),
            FacetValue::Temporal(t) => criterion.temporal_constraint = Some(t),
        }
    }
}

fn call<T: StructuredOutput>(
    gw: &Gateway,
    request: &ModelRequest,
    stage: &'static str,
    criterion: Option<&str>,
    usage: &mut UsageRecord,
) -> Result<T, PrepError> {
    let done = gw.complete::<T>(request).map_err(|source| PrepError::Gateway {
        stage,
        criterion: criterion.map(str::to_string),
        source,
    })?;
    usage.add(&done.usage);
    Ok(done.value)
}

/// Splits a free-text criteria block. Ids are `I01, I02, ...` for inclusion
/// and `E01, ...` for exclusion criteria, in the order returned.
pub fn split_criteria(
    gw: &Gateway,
    raw_criteria_text: &str,
) -> Result<(Vec<EligibilityCriterion>, UsageRecord), PrepError> {
    if raw_criteria_text.trim().is_empty() {
        return Err(PrepError::Precondition("criteria text is empty".into()));
    }
    let mut usage = UsageRecord::default();
    let request =
        ModelRequest::new(ModelRole::Splitter, SplitCriteriaResponse::SCHEMA_ID, prompts::SPLIT_CRITERIA.text)
            .text(raw_criteria_text);
    let response: SplitCriteriaResponse = call(gw, &request, "criteria split", None, &mut usage)?;
    if response.criteria.is_empty() {
        return Err(PrepError::NoCriteria);
    }
    let (mut inc, mut exc) = (0, 0);
    let criteria = response
        .criteria
        .into_iter()
        .map(|c| {
            let id = match c.kind {
                CriterionKind::Inclusion => {
                    inc += 1;
                    format!("I{inc:02}")
                }
                CriterionKind::Exclusion => {
                    exc += 1;
                    format!("E{exc:02}")
                }
            };
            let mut criterion = EligibilityCriterion::new(id, c.kind, c.description.trim());
            criterion.explanation = c.explanation.filter(|e| !e.trim().is_empty());
            criterion
        })
        .collect();
    Ok((criteria, usage))
}

pub fn generate_relevance_criterion(gw: &Gateway, trial: &Trial) -> Result<(String, UsageRecord), PrepError> {
    if trial.title.trim().is_empty() {
        return Err(PrepError::Precondition(format!("trial {} has no title", trial.trial_id)));
    }
    let inclusion: Vec<String> = trial.inclusion_criteria().map(|c| format!("- {}", c.description)).collect();
    if inclusion.is_empty() {
        return Err(PrepError::Precondition(format!("trial {} has no inclusion criteria", trial.trial_id)));
    }
    let system = prompts::RELEVANCE_CRITERION
        .render(&[("trial_name", &trial.title), ("inclusion_criteria", &inclusion.join("\n"))])?;
    let request =
        ModelRequest::new(ModelRole::RelevanceGen, RelevanceCriterionResponse::SCHEMA_ID, system).text(&trial.title);
    let mut usage = UsageRecord::default();
    let response: RelevanceCriterionResponse = call(gw, &request, "relevance criterion", None, &mut usage)?;
    Ok((response.patient_relevance_criterion.trim().to_string(), usage))
}

pub fn generate_guidelines(
    gw: &Gateway,
    criterion: &EligibilityCriterion,
) -> Result<(Vec<String>, UsageRecord), PrepError> {
    if criterion.description.trim().is_empty() {
        return Err(PrepError::Precondition(format!("criterion {} has no description", criterion.criterion_id)));
    }
    let request =
        ModelRequest::new(ModelRole::GuidelineGen, GuidelinesResponse::SCHEMA_ID, prompts::RETRIEVAL_GUIDELINES.text)
            .text(&criterion.description);
    let mut usage = UsageRecord::default();
    let response: GuidelinesResponse =
        call(gw, &request, "guideline generation", Some(&criterion.criterion_id), &mut usage)?;
    Ok((response.guidelines.into_iter().map(|g| g.trim().to_string()).collect(), usage))
}

pub fn classify_criterion(
    gw: &Gateway,
    trial_title: &str,
    criterion: &EligibilityCriterion,
    facet: Facet,
) -> Result<(FacetValue, UsageRecord), PrepError> {
    let id = Some(criterion.criterion_id.as_str());
    let mut usage = UsageRecord::default();
    let build = |template: &prompts::PromptTemplate, schema: &str| {
        ModelRequest::new(ModelRole::Classifier, schema, template.text)
            .text(format!("Trial: {trial_title}"))
            .text(format!("Eligibility criterion: {}", criterion.description))
    };
    let value = match facet {
        Facet::Domain => {
            let request = build(&prompts::CRITERION_DOMAIN, DomainResponse::SCHEMA_ID);
            FacetValue::Domain(call::<DomainResponse>(gw, &request, "domain classification", id, &mut usage)?.domain)
        }
        Facet::DataFormat => {
            let request = build(&prompts::CRITERION_DATA_FORMAT, DataFormatResponse::SCHEMA_ID);
            let r: DataFormatResponse = call(gw, &request, "data format classification", id, &mut usage)?;
            FacetValue::DataFormat(r.requested_data_format)
        }
        Facet::Temporal => {
            let request = build(&prompts::CRITERION_TEMPORAL, TemporalResponse::SCHEMA_ID);
            let r: TemporalResponse = call(gw, &request, "temporal classification", id, &mut usage)?;
            FacetValue::Temporal(r.temporal_constraint)
        }
    };
    Ok((value, usage))
}

#[derive(Debug, Clone, Default)]
pub struct PrepSummary {
    pub usage: UsageRecord,
    pub split: bool,
    pub relevance_generated: bool,
    pub guidelines_generated: usize,
    pub facets_classified: usize,
}

/// Fills in whatever the trial is missing. Steps already done are skipped,
/// so a failed run can be resumed. On error the trial keeps the progress
/// made so far and `prepared` stays false.
pub fn prepare_trial(gw: &Gateway, trial: &mut Trial, workers: usize) -> Result<PrepSummary, PrepError> {
    let mut summary = PrepSummary::default();
    if trial.criteria.is_empty() {
        let (criteria, usage) = split_criteria(gw, &trial.raw_criteria_text)?;
        trial.criteria = criteria;
        trial.prepared = false;
        summary.usage.add(&usage);
        summary.split = true;
    }
    if trial.relevance_criterion.is_none() {
        let (relevance, usage) = generate_relevance_criterion(gw, trial)?;
        trial.relevance_criterion = Some(relevance);
        summary.usage.add(&usage);
        summary.relevance_generated = true;
    }

    let title = trial.title.clone();
    let results = crate::par::map(&trial.criteria, workers, |criterion| {
        let mut updated = criterion.clone();
        let mut usage = UsageRecord::default();
        let mut counts = (0usize, 0usize);
        let mut first_error = None;
        if updated.guidelines.is_empty() {
            match generate_guidelines(gw, &updated) {
                Ok((g, u)) => {
                    updated.guidelines = g;
                    usage.add(&u);
                    counts.0 += 1;
                }
                Err(e) => first_error = Some(e),
            }
        }
        for facet in Facet::ALL {
            let missing = match facet {
                Facet::Domain => updated.domain.is_none(),
                Facet::DataFormat => updated.data_format.is_none(),
                Facet::Temporal => updated.temporal_constraint.is_none(),
            };
            if !missing {
                continue;
            }
            match classify_criterion(gw, &title, &updated, facet) {
                Ok((v, u)) => {
                    v.apply(&mut updated);
                    usage.add(&u);
                    counts.1 += 1;
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        (updated, usage, counts, first_error)
    });

    let mut first_error = None;
    for (slot, (updated, usage, counts, error)) in trial.criteria.iter_mut().zip(results) {
        *slot = updated;
        summary.usage.add(&usage);
        summary.guidelines_generated += counts.0;
        summary.facets_classified += counts.1;
        if first_error.is_none() {
            first_error = error;
        }
    }
    if let Some(e) = first_error {
        trial.prepared = false;
        return Err(e);
    }
    trial.prepared = true;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{MockChat, ScriptRule, ScriptedReply};
    use crate::gateway::{RetryPolicy, RoleBinding};
    use crate::model::{validate_trial, TrialPhase};
    use serde_json::json;
    use std::sync::Arc;

    fn gateway(rules: Vec<ScriptRule>) -> Gateway {
        let chat = Arc::new(MockChat::new(11).with_rules(rules));
        let mut b = Gateway::builder();
        for role in [ModelRole::Splitter, ModelRole::GuidelineGen, ModelRole::RelevanceGen, ModelRole::Classifier] {
            b = b.bind(role, RoleBinding::chat("m", chat.clone()).retry(RetryPolicy::no_delay()));
        }
        b.build()
    }

    fn trial(text: &str) -> Trial {
        Trial {
            trial_id: "T1".into(),
            title: "Insulin titration in type 2 diabetes".into(),
            raw_criteria_text: text.into(),
            phase: TrialPhase::III,
            therapeutic_area: "Endocrinology".into(),
            criteria: vec![],
            relevance_criterion: None,
            site_type: None,
            prepared: false,
        }
    }

    #[test]
    fn scripted_split_preserves_kinds() {
        let gw = gateway(vec![ScriptRule::for_role(ModelRole::Splitter).reply(ScriptedReply::Json(json!({
            "criteria": [
                {"kind": "inclusion", "description": "Age 18 or older", "explanation": "Adult"},
                {"kind": "inclusion", "description": "HbA1c 7-10%", "explanation": "Poor control"},
                {"kind": "exclusion", "description": "Pregnancy", "explanation": ""}
            ]
        })))]);
        let (criteria, _) = split_criteria(&gw, "anything").unwrap();
        let ids: Vec<&str> = criteria.iter().map(|c| c.criterion_id.as_str()).collect();
        assert_eq!(ids, vec!["I01", "I02", "E01"]);
        assert_eq!(criteria[2].kind, CriterionKind::Exclusion);
        assert_eq!(criteria[2].explanation, None);
    }

    #[test]
    fn zero_criteria_is_an_error() {
        let gw =
            gateway(
                vec![ScriptRule::for_role(ModelRole::Splitter).reply(ScriptedReply::Json(json!({"criteria": []})))],
            );
        assert!(matches!(split_criteria(&gw, "x"), Err(PrepError::NoCriteria)));
        assert!(matches!(split_criteria(&gw, "  "), Err(PrepError::Precondition(_))));
    }

    #[test]
    fn five_guidelines_fail_after_retries() {
        let gw = gateway(vec![ScriptRule::for_role(ModelRole::GuidelineGen)
            .reply(ScriptedReply::Json(json!({"guidelines": ["a", "b", "c", "d", "e"]})))]);
        let c = EligibilityCriterion::new("I01", CriterionKind::Inclusion, "HbA1c between 6.5% and 9.5%");
        let err = generate_guidelines(&gw, &c).unwrap_err();
        assert!(matches!(err, PrepError::Gateway { source: GatewayError::SchemaExhausted { .. }, .. }));
    }

    #[test]
    fn relevance_needs_inclusion_criteria() {
        let gw = gateway(vec![]);
        let mut t = trial("x");
        t.criteria = vec![EligibilityCriterion::new("E01", CriterionKind::Exclusion, "Pregnancy")];
        assert!(matches!(generate_relevance_criterion(&gw, &t), Err(PrepError::Precondition(_))));
    }

    #[test]
    fn relevance_prompt_carries_title_and_criteria() {
        let gw = gateway(vec![ScriptRule::for_role(ModelRole::RelevanceGen).containing("- HbA1c above 7%").reply(
            ScriptedReply::Json(json!({"patientRelevanceCriterion": "Patient has a diagnosis of diabetes mellitus"})),
        )]);
        let mut t = trial("x");
        t.criteria = vec![EligibilityCriterion::new("I01", CriterionKind::Inclusion, "HbA1c above 7%")];
        let (r, _) = generate_relevance_criterion(&gw, &t).unwrap();
        assert_eq!(r, "Patient has a diagnosis of diabetes mellitus");
    }

    #[test]
    fn full_prep_satisfies_invariants_and_is_idempotent() {
        let gw = gateway(vec![]);
        let mut t = trial(
            "Inclusion Criteria:\n- Age 18 or older\n- HbA1c > 7% within 3 months\nExclusion Criteria:\n- Pregnancy\n",
        );
        prepare_trial(&gw, &mut t, 4).unwrap();
        assert!(t.prepared);
        assert_eq!(t.criteria.len(), 3);
        assert!(validate_trial(&t).is_empty(), "{:?}", validate_trial(&t));
        for c in &t.criteria {
            assert!((1..=4).contains(&c.guidelines.len()));
        }
        assert_eq!(t.criteria[1].temporal_constraint, Some(TemporalConstraint::Yes));
        assert_eq!(t.criteria[1].data_format, Some(DataFormat::Structured));

        let before = t.clone();
        let calls = gw.usage_log().entries().len();
        let again = prepare_trial(&gw, &mut t, 4).unwrap();
        assert_eq!(t, before);
        assert_eq!(gw.usage_log().entries().len(), calls);
        assert_eq!(again.usage, UsageRecord::default());
    }

    #[test]
    fn classifier_facets_follow_appendix_examples() {
        let gw = gateway(vec![]);
        let c = EligibilityCriterion::new("I01", CriterionKind::Inclusion, "Hemoglobin >10 g/dL");
        let (v, _) = classify_criterion(&gw, "t", &c, Facet::DataFormat).unwrap();
        assert_eq!(v, FacetValue::DataFormat(DataFormat::Structured));
        let c = EligibilityCriterion::new("E01", CriterionKind::Exclusion, "Surgery within 6 months");
        let (v, _) = classify_criterion(&gw, "t", &c, Facet::Temporal).unwrap();
        assert_eq!(v, FacetValue::Temporal(TemporalConstraint::Yes));
    }
}
