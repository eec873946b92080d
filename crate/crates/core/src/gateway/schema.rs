//! Structured responses expected from each model role.
//!
//! Every response type carries a stable schema id, a JSON Schema handed to
//! live providers, and a validation step run on whatever the model returns.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::model::{CriterionDomain, CriterionKind, DataFormat, TemporalConstraint, MAX_GUIDELINES};

pub trait StructuredOutput: DeserializeOwned + Serialize + Send + 'static {
    const SCHEMA_ID: &'static str;

    fn json_schema() -> Value;

    /// Constraints beyond what deserialization already enforces.
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Parses and validates a raw model answer as `T`.
pub fn validate_as<T: StructuredOutput>(content: &str) -> Result<T, String> {
    let body = extract_json_object(content).ok_or_else(|| "response contains no JSON object".to_string())?;
    let value: T =
        serde_json::from_str(body).map_err(|e| format!("response does not match schema {}: {e}", T::SCHEMA_ID))?;
    value.check()?;
    Ok(value)
}

/// Strips code fences and surrounding prose around the outermost JSON object.
fn extract_json_object(content: &str) -> Option<&str> {
    let start = content.find('{')?;
    let end = content.rfind('}')?;
    (end >= start).then(|| &content[start..=end])
}

/// Id → JSON Schema for every response type a gateway accepts.
#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: std::collections::BTreeMap<String, Value>,
}

impl SchemaRegistry {
    pub fn with_builtin() -> Self {
        let mut registry = SchemaRegistry::default();
        registry.register::<SplitCriteriaResponse>();
        registry.register::<GuidelinesResponse>();
        registry.register::<RelevanceCriterionResponse>();
        registry.register::<DomainResponse>();
        registry.register::<DataFormatResponse>();
        registry.register::<TemporalResponse>();
        registry.register::<AssessmentResponse>();
        registry.register::<VisualElementsResponse>();
        registry.register::<RecordTypeResponse>();
        registry
    }

    pub fn register<T: StructuredOutput>(&mut self) {
        self.schemas.insert(T::SCHEMA_ID.to_string(), T::json_schema());
    }

    pub fn get(&self, id: &str) -> Option<&Value> {
        self.schemas.get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCriterion {
    pub kind: CriterionKind,
    pub description: String,
    #[serde(default)]
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCriteriaResponse {
    pub criteria: Vec<SplitCriterion>,
}

impl StructuredOutput for SplitCriteriaResponse {
    const SCHEMA_ID: &'static str = "split_criteria";

    fn json_schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "criteria": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "kind": {"type": "string", "enum": ["inclusion", "exclusion"]},
                            "description": {"type": "string"},
                            "explanation": {"type": "string"}
                        },
                        "required": ["kind", "description", "explanation"]
                    }
                }
            },
            "required": ["criteria"]
        })
    }

    fn check(&self) -> Result<(), String> {
        match self.criteria.iter().position(|c| c.description.trim().is_empty()) {
            Some(i) => Err(format!("criterion #{} has an empty description", i + 1)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelinesResponse {
    pub guidelines: Vec<String>,
}

impl StructuredOutput for GuidelinesResponse {
    const SCHEMA_ID: &'static str = "retrieval_guidelines";

    fn json_schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "guidelines": {"type": "array", "items": {"type": "string"}, "minItems": 1, "maxItems": MAX_GUIDELINES}
            },
            "required": ["guidelines"]
        })
    }

    fn check(&self) -> Result<(), String> {
        let n = self.guidelines.len();
        if !(1..=MAX_GUIDELINES).contains(&n) {
            return Err(format!("expected between 1 and {MAX_GUIDELINES} guidelines, got {n}"));
        }
        if self.guidelines.iter().any(|g| g.trim().is_empty()) {
            return Err("guidelines must not be empty strings".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCriterionResponse {
    #[serde(rename = "patientRelevanceCriterion")]
    pub patient_relevance_criterion: String,
}

impl StructuredOutput for RelevanceCriterionResponse {
    const SCHEMA_ID: &'static str = "relevance_criterion";

    fn json_schema() -> Value {
        json!({
            "type": "object",
            "properties": {"patientRelevanceCriterion": {"type": "string"}},
            "required": ["patientRelevanceCriterion"]
        })
    }

    fn check(&self) -> Result<(), String> {
        if self.patient_relevance_criterion.trim().is_empty() {
            return Err("patientRelevanceCriterion is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResponse {
    pub domain: CriterionDomain,
}

impl StructuredOutput for DomainResponse {
    const SCHEMA_ID: &'static str = "criterion_domain";

    fn json_schema() -> Value {
        let names: Vec<&str> = CriterionDomain::ALL.iter().map(|d| d.as_str()).collect();
        json!({
            "type": "object",
            "properties": {"domain": {"type": "string", "enum": names}},
            "required": ["domain"]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFormatResponse {
    pub requested_data_format: DataFormat,
}

impl StructuredOutput for DataFormatResponse {
    const SCHEMA_ID: &'static str = "criterion_data_format";

    fn json_schema() -> Value {
        json!({
            "type": "object",
            "properties": {"requested_data_format": {"type": "string", "enum": ["Structured", "Unstructured"]}},
            "required": ["requested_data_format"]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalResponse {
    pub temporal_constraint: TemporalConstraint,
}

impl StructuredOutput for TemporalResponse {
    const SCHEMA_ID: &'static str = "criterion_temporal";

    fn json_schema() -> Value {
        json!({
            "type": "object",
            "properties": {"temporal_constraint": {"type": "string", "enum": ["Yes", "No"]}},
            "required": ["temporal_constraint"]
        })
    }
}

/// Assessor answer. `insufficient_information` extends the two-field answer
/// so that "cannot decide" is an explicit outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentResponse {
    pub rationale: String,
    pub is_met: bool,
    #[serde(default)]
    pub insufficient_information: bool,
}

impl StructuredOutput for AssessmentResponse {
    const SCHEMA_ID: &'static str = "criterion_assessment";

    fn json_schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "rationale": {"type": "string"},
                "is_met": {"type": "boolean"},
                "insufficient_information": {"type": "boolean"}
            },
            "required": ["rationale", "is_met"]
        })
    }

    fn check(&self) -> Result<(), String> {
        if self.rationale.trim().is_empty() {
            return Err("rationale is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VisualElement {
    #[serde(rename = "Tabular data")]
    TabularData,
    Images,
    Graphs,
    #[serde(rename = "Handwritten notes")]
    HandwrittenNotes,
    Other,
}

impl VisualElement {
    pub const ALL: [VisualElement; 5] = [
        VisualElement::TabularData,
        VisualElement::Images,
        VisualElement::Graphs,
        VisualElement::HandwrittenNotes,
        VisualElement::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VisualElement::TabularData => "Tabular data",
            VisualElement::Images => "Images",
            VisualElement::Graphs => "Graphs",
            VisualElement::HandwrittenNotes => "Handwritten notes",
            VisualElement::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualElementsResponse {
    pub rationale: String,
    pub visual_elements: Vec<VisualElement>,
}

impl StructuredOutput for VisualElementsResponse {
    const SCHEMA_ID: &'static str = "visual_elements";

    fn json_schema() -> Value {
        let names: Vec<&str> = VisualElement::ALL.iter().map(|v| v.as_str()).collect();
        json!({
            "type": "object",
            "properties": {
                "rationale": {"type": "string"},
                "visual_elements": {"type": "array", "items": {"type": "string", "enum": names}}
            },
            "required": ["rationale", "visual_elements"]
        })
    }
}

/// Page categories used when profiling a corpus of medical records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecordType {
    #[serde(rename = "Administrative Documents")]
    AdministrativeDocuments,
    #[serde(rename = "Clinical Notes")]
    ClinicalNotes,
    #[serde(rename = "Diagnostic Reports")]
    DiagnosticReports,
    #[serde(rename = "Procedural and Treatment Documents")]
    ProceduralAndTreatment,
}

impl RecordType {
    pub const ALL: [RecordType; 4] = [
        RecordType::ClinicalNotes,
        RecordType::DiagnosticReports,
        RecordType::ProceduralAndTreatment,
        RecordType::AdministrativeDocuments,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RecordType::AdministrativeDocuments => "Administrative Documents",
            RecordType::ClinicalNotes => "Clinical Notes",
            RecordType::DiagnosticReports => "Diagnostic Reports",
            RecordType::ProceduralAndTreatment => "Procedural and Treatment Documents",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordTypeResponse {
    pub record_type: RecordType,
}

impl StructuredOutput for RecordTypeResponse {
    const SCHEMA_ID: &'static str = "record_type";

    fn json_schema() -> Value {
        let names: Vec<&str> = RecordType::ALL.iter().map(|r| r.as_str()).collect();
        json!({
            "type": "object",
            "properties": {"record_type": {"type": "string", "enum": names}},
            "required": ["record_type"]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced_json_is_accepted() {
        let raw = "```json\n{\"rationale\": \"HbA1c 7.1%\", \"is_met\": true}\n```";
        let parsed: AssessmentResponse = validate_as(raw).unwrap();
        assert!(parsed.is_met);
        assert!(!parsed.insufficient_information);
    }

    #[test]
    fn guideline_count_bounds() {
        let four = r#"{"guidelines": ["a", "b", "c", "d"]}"#;
        assert!(validate_as::<GuidelinesResponse>(four).is_ok());
        let five = r#"{"guidelines": ["a", "b", "c", "d", "e"]}"#;
        assert!(validate_as::<GuidelinesResponse>(five).unwrap_err().contains("between 1 and 4"));
        assert!(validate_as::<GuidelinesResponse>(r#"{"guidelines": []}"#).is_err());
    }

    #[test]
    fn out_of_vocabulary_domain_is_rejected() {
        assert!(validate_as::<DomainResponse>(r#"{"domain": "Genomics"}"#).is_err());
        let ok: DomainResponse = validate_as(r#"{"domain": "LabOrBiomarker"}"#).unwrap();
        assert_eq!(ok.domain, CriterionDomain::LabOrBiomarker);
    }

    #[test]
    fn registry_knows_builtin_ids() {
        let registry = SchemaRegistry::with_builtin();
        for id in ["split_criteria", "criterion_assessment", "record_type", "visual_elements"] {
            assert!(registry.get(id).is_some(), "{id}");
        }
        assert!(registry.get("nope").is_none());
    }
}
