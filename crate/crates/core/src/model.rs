//! Domain types shared by every stage of the pipeline.
//!
//! All types are plain values: they are `Clone + Send + Sync`, carry no
//! interior mutability and serialize to the canonical record format defined
//! in [`crate::record`].

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::gateway::UsageRecord;

/// Maximum number of retrieval guidelines attached to a prepared criterion.
pub const MAX_GUIDELINES: usize = 4;

/// Lowest raster resolution accepted for a record page.
pub const MIN_PAGE_DPI: u32 = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrialPhase {
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
    #[serde(rename = "other")]
    Other,
}

/// Research site categories used to describe where a trial runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SiteType {
    IndependentSiteInOutpatientClinic,
    ServicesCompany,
    SiteNetworkResearchCenter,
    IndependentResearchSite,
    OutpatientClinic,
    OncologyCareCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionKind {
    Inclusion,
    Exclusion,
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriterionKind::Inclusion => "inclusion",
            CriterionKind::Exclusion => "exclusion",
        })
    }
}

/// What a criterion is about. Serialized names follow the classifier
/// vocabulary, so a model answer deserializes directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CriterionDomain {
    #[serde(rename = "Demographic/Administrative", alias = "DemographicOrAdministrative")]
    DemographicAdministrative,
    DiseaseOrConditionSpecific,
    ComorbidityOrMedicalHistory,
    PriorOrConcomitantTreatments,
    LabOrBiomarker,
    PerformanceOrFunctionalStatus,
    SafetyOrRisk,
    OtherPragmatic,
}

impl CriterionDomain {
    pub const ALL: [CriterionDomain; 8] = [
        CriterionDomain::DemographicAdministrative,
        CriterionDomain::DiseaseOrConditionSpecific,
        CriterionDomain::ComorbidityOrMedicalHistory,
        CriterionDomain::PriorOrConcomitantTreatments,
        CriterionDomain::LabOrBiomarker,
        CriterionDomain::PerformanceOrFunctionalStatus,
        CriterionDomain::SafetyOrRisk,
        CriterionDomain::OtherPragmatic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CriterionDomain::DemographicAdministrative => "Demographic/Administrative",
            CriterionDomain::DiseaseOrConditionSpecific => "DiseaseOrConditionSpecific",
            CriterionDomain::ComorbidityOrMedicalHistory => "ComorbidityOrMedicalHistory",
            CriterionDomain::PriorOrConcomitantTreatments => "PriorOrConcomitantTreatments",
            CriterionDomain::LabOrBiomarker => "LabOrBiomarker",
            CriterionDomain::PerformanceOrFunctionalStatus => "PerformanceOrFunctionalStatus",
            CriterionDomain::SafetyOrRisk => "SafetyOrRisk",
            CriterionDomain::OtherPragmatic => "OtherPragmatic",
        }
    }
}

impl fmt::Display for CriterionDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriterionDomain {
    type Err = EnumParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "DemographicOrAdministrative" {
            return Ok(CriterionDomain::DemographicAdministrative);
        }
        CriterionDomain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| EnumParseError::new(s, CriterionDomain::ALL.iter().map(|d| d.as_str())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataFormat {
    Structured,
    Unstructured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemporalConstraint {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityCriterion {
    pub criterion_id: String,
    /// Criterion text exactly as split from the trial's criteria block.
    pub description: String,
    /// Plain-English explanation produced while splitting. Kept as metadata,
    /// never fed to the assessor in place of `description`.
    #[serde(default)]
    pub explanation: Option<String>,
    pub kind: CriterionKind,
    #[serde(default)]
    pub guidelines: Vec<String>,
    #[serde(default)]
    pub domain: Option<CriterionDomain>,
    #[serde(default)]
    pub data_format: Option<DataFormat>,
    #[serde(default)]
    pub temporal_constraint: Option<TemporalConstraint>,
}

impl EligibilityCriterion {
    pub fn new(criterion_id: impl Into<String>, kind: CriterionKind, description: impl Into<String>) -> Self {
        EligibilityCriterion {
            criterion_id: criterion_id.into(),
            description: description.into(),
            explanation: None,
            kind,
            guidelines: Vec::new(),
            domain: None,
            data_format: None,
            temporal_constraint: None,
        }
    }

    pub fn facets_complete(&self) -> bool {
        self.domain.is_some() && self.data_format.is_some() && self.temporal_constraint.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    pub title: String,
    pub raw_criteria_text: String,
    pub phase: TrialPhase,
    pub therapeutic_area: String,
    #[serde(default)]
    pub criteria: Vec<EligibilityCriterion>,
    #[serde(default)]
    pub relevance_criterion: Option<String>,
    #[serde(default)]
    pub site_type: Option<SiteType>,
    /// Set once trial preparation has populated criteria, guidelines and facets.
    #[serde(default)]
    pub prepared: bool,
}

impl Trial {
    pub fn criterion(&self, criterion_id: &str) -> Option<&EligibilityCriterion> {
        self.criteria.iter().find(|c| c.criterion_id == criterion_id)
    }

    pub fn inclusion_criteria(&self) -> impl Iterator<Item = &EligibilityCriterion> {
        self.criteria.iter().filter(|c| c.kind == CriterionKind::Inclusion)
    }
}

/// A broken Trial invariant. Violations are reported as data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrialViolation {
    EmptyTrialId,
    CriteriaEmptyAfterPrep,
    DuplicateCriterionId(String),
    EmptyDescription(String),
    GuidelinesExceedLimit { criterion_id: String, count: usize },
    MissingGuidelinesAfterPrep(String),
    MissingFacetsAfterPrep(String),
}

impl fmt::Display for TrialViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrialViolation::EmptyTrialId => write!(f, "trial_id empty"),
            TrialViolation::CriteriaEmptyAfterPrep => write!(f, "criteria empty after prep"),
            TrialViolation::DuplicateCriterionId(id) => write!(f, "duplicate criterion_id {id}"),
            TrialViolation::EmptyDescription(id) => write!(f, "criterion {id}: description empty"),
            TrialViolation::GuidelinesExceedLimit { criterion_id, count } => {
                write!(f, "guidelines exceed {MAX_GUIDELINES} (criterion {criterion_id} has {count})")
            }
            TrialViolation::MissingGuidelinesAfterPrep(id) => {
                write!(f, "criterion {id}: no guidelines after prep")
            }
            TrialViolation::MissingFacetsAfterPrep(id) => {
                write!(f, "criterion {id}: classification facets missing after prep")
            }
        }
    }
}

/// Checks every Trial and EligibilityCriterion invariant; an empty list means
/// the trial is well formed.
pub fn validate_trial(trial: &Trial) -> Vec<TrialViolation> {
    let mut violations = Vec::new();
    if trial.trial_id.trim().is_empty() {
        violations.push(TrialViolation::EmptyTrialId);
    }
    if trial.prepared && trial.criteria.is_empty() {
        violations.push(TrialViolation::CriteriaEmptyAfterPrep);
    }
    let mut seen = HashSet::new();
    for criterion in &trial.criteria {
        let id = &criterion.criterion_id;
        if !seen.insert(id.as_str()) {
            violations.push(TrialViolation::DuplicateCriterionId(id.clone()));
        }
        if criterion.description.trim().is_empty() {
            violations.push(TrialViolation::EmptyDescription(id.clone()));
        }
        if criterion.guidelines.len() > MAX_GUIDELINES {
            violations.push(TrialViolation::GuidelinesExceedLimit {
                criterion_id: id.clone(),
                count: criterion.guidelines.len(),
            });
        }
        if trial.prepared {
            if criterion.guidelines.is_empty() {
                violations.push(TrialViolation::MissingGuidelinesAfterPrep(id.clone()));
            }
            if !criterion.facets_complete() {
                violations.push(TrialViolation::MissingFacetsAfterPrep(id.clone()));
            }
        }
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaType {
    Pdf,
    Image,
    PlainText,
}

impl MediaType {
    /// Guesses the media type from a file extension.
    pub fn from_path(path: &std::path::Path) -> Option<MediaType> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pdf" => Some(MediaType::Pdf),
            "png" | "jpg" | "jpeg" => Some(MediaType::Image),
            "txt" | "text" => Some(MediaType::PlainText),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub document_id: String,
    pub patient_id: String,
    pub filename: String,
    pub media_type: MediaType,
    /// Number of pages produced by splitting; 0 until the document is split.
    pub page_count: u32,
    /// Hex SHA-256 of the uploaded bytes.
    pub content_hash: String,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordPage {
    pub page_id: String,
    pub document_id: String,
    pub page_number: u32,
    #[serde(with = "crate::record::base64_bytes")]
    pub image_bytes: Vec<u8>,
    pub dpi: u32,
    pub redacted: bool,
}

impl fmt::Debug for RecordPage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RecordPage")
            .field("page_id", &self.page_id)
            .field("document_id", &self.document_id)
            .field("page_number", &self.page_number)
            .field("image_bytes", &format_args!("<{} bytes>", self.image_bytes.len()))
            .field("dpi", &self.dpi)
            .field("redacted", &self.redacted)
            .finish()
    }
}

/// How pages are de-identified before they are embedded or shown.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RedactionPolicy {
    #[default]
    Passthrough,
    /// `target` is either an `http(s)://` endpoint or a command line. Both
    /// take a PNG and must return a PNG of identical dimensions.
    Plugin { target: String },
}

/// A page that could not be redacted and was kept out of the record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantinedPage {
    pub patient_id: String,
    pub document_id: String,
    pub page_number: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    #[serde(default)]
    pub documents: Vec<SourceDocument>,
    /// Pages in document order, then page order.
    #[serde(default)]
    pub pages: Vec<RecordPage>,
    #[serde(default)]
    pub quarantined: Vec<QuarantinedPage>,
    #[serde(default)]
    pub redaction: RedactionPolicy,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>) -> Self {
        PatientRecord {
            patient_id: patient_id.into(),
            documents: Vec::new(),
            pages: Vec::new(),
            quarantined: Vec::new(),
            redaction: RedactionPolicy::Passthrough,
        }
    }

    pub fn page(&self, page_id: &str) -> Option<&RecordPage> {
        self.pages.iter().find(|p| p.page_id == page_id)
    }

    /// Position of every page in document order, keyed by page id.
    pub fn document_order(&self) -> std::collections::HashMap<&str, usize> {
        self.pages.iter().enumerate().map(|(i, p)| (p.page_id.as_str(), i)).collect()
    }
}

/// Checks page bookkeeping: every page belongs to a known document and, per
/// document, kept pages plus quarantined pages cover exactly `1..=page_count`.
pub fn validate_patient_record(record: &PatientRecord) -> Vec<String> {
    let mut problems = Vec::new();
    for doc in &record.documents {
        let mut numbers: Vec<u32> = record
            .pages
            .iter()
            .filter(|p| p.document_id == doc.document_id)
            .map(|p| p.page_number)
            .chain(record.quarantined.iter().filter(|q| q.document_id == doc.document_id).map(|q| q.page_number))
            .collect();
        numbers.sort_unstable();
        let expected: Vec<u32> = (1..=doc.page_count).collect();
        if numbers != expected {
            problems.push(format!(
                "document {}: page numbers {:?} do not cover 1..={}",
                doc.document_id, numbers, doc.page_count
            ));
        }
    }
    for page in &record.pages {
        if !record.documents.iter().any(|d| d.document_id == page.document_id) {
            problems.push(format!("page {} references unknown document {}", page.page_id, page.document_id));
        }
        if page.image_bytes.is_empty() {
            problems.push(format!("page {} has no image bytes", page.page_id));
        }
        if page.dpi < MIN_PAGE_DPI {
            problems.push(format!("page {} dpi {} below {MIN_PAGE_DPI}", page.page_id, page.dpi));
        }
    }
    problems
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Met,
    Unmet,
    Unknown,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Met, Verdict::Unmet, Verdict::Unknown];

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Met => "Met",
            Verdict::Unmet => "Unmet",
            Verdict::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = EnumParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verdict::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| EnumParseError::new(s, Verdict::ALL.iter().map(|v| v.as_str())))
    }
}

/// Rule choosing which record pages accompany a criterion to the assessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum RetrievalStrategy {
    AllPages,
    TopKFlat { k: u32 },
    TopKPerGuideline { k: u32 },
}

impl Default for RetrievalStrategy {
    fn default() -> Self {
        RetrievalStrategy::TopKPerGuideline { k: 3 }
    }
}

impl RetrievalStrategy {
    pub fn k(&self) -> Option<u32> {
        match self {
            RetrievalStrategy::AllPages => None,
            RetrievalStrategy::TopKFlat { k } | RetrievalStrategy::TopKPerGuideline { k } => Some(*k),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.k().is_none_or(|k| k >= 1)
    }
}

impl fmt::Display for RetrievalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetrievalStrategy::AllPages => write!(f, "all"),
            RetrievalStrategy::TopKFlat { k } => write!(f, "topk:{k}"),
            RetrievalStrategy::TopKPerGuideline { k } => write!(f, "topk-guideline:{k}"),
        }
    }
}

impl FromStr for RetrievalStrategy {
    type Err = String;

    /// Accepts `all`, `topk:<k>` and `topk-guideline:<k>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_k = |k: &str| -> Result<u32, String> {
            match k.parse::<u32>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => Err(format!("invalid k `{k}`: expected a positive integer")),
            }
        };
        match s.split_once(':') {
            None if s == "all" => Ok(RetrievalStrategy::AllPages),
            Some(("topk", k)) => Ok(RetrievalStrategy::TopKFlat { k: parse_k(k)? }),
            Some(("topk-guideline", k)) => Ok(RetrievalStrategy::TopKPerGuideline { k: parse_k(k)? }),
            _ => Err(format!("unknown strategy `{s}`: expected one of `all`, `topk:<k>`, `topk-guideline:<k>`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionAssessment {
    pub assessment_id: String,
    pub patient_id: String,
    pub trial_id: String,
    pub criterion_id: String,
    pub verdict: Verdict,
    pub rationale: String,
    pub source_page_ids: Vec<String>,
    pub as_of_date: NaiveDate,
    pub usage: UsageRecord,
    pub strategy: RetrievalStrategy,
}

impl CriterionAssessment {
    pub fn check(&self) -> Result<(), String> {
        if self.verdict != Verdict::Unknown && self.rationale.trim().is_empty() {
            return Err(format!("assessment {}: {} verdict without rationale", self.assessment_id, self.verdict));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatientLabel {
    ToScreen,
    NotEligible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum FeedbackPayload {
    CriterionReview { criterion_id: String, human_verdict: Verdict },
    PatientClassification { label: PatientLabel },
}

/// One human review action. Events are append-only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub event_id: String,
    pub actor_id: String,
    pub timestamp: DateTime<Utc>,
    pub patient_id: String,
    pub trial_id: String,
    pub payload: FeedbackPayload,
}

/// Error returned when a string is outside a closed enum domain.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid value `{value}`: expected one of {}", allowed.join(", "))]
pub struct EnumParseError {
    pub value: String,
    pub allowed: Vec<String>,
}

impl EnumParseError {
    fn new<'a>(value: &str, allowed: impl Iterator<Item = &'a str>) -> Self {
        EnumParseError { value: value.to_string(), allowed: allowed.map(str::to_string).collect() }
    }
}
