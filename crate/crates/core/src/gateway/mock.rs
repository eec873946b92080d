//! Deterministic offline providers.
//!
//! [`MockChat`] answers from scripted rules when one matches and otherwise
//! synthesizes a schema-valid reply from a hash of the seed and the request.
//! [`MockEmbedder`] expands a hash of the input into a unit vector, so equal
//! inputs always embed identically.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::schema::{RecordType, VisualElement};
use super::{
    ChatProvider, EmbedInput, EmbedReply, EmbeddingProvider, ModelRole, ProviderError, ProviderReply, ProviderRequest,
    UserPart,
};
use crate::model::CriterionDomain;

/// Token estimate charged per image part.
const IMAGE_TOKENS: u64 = 765;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum ScriptedReply {
    Json(Value),
    Raw(String),
    TransportError,
    RateLimited,
    Fatal(String),
}

/// Matches requests by role, schema, prompt substring and image hash; all
/// present conditions must hold. Successive matches walk through `replies`,
/// and the last reply repeats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub role: Option<ModelRole>,
    #[serde(default)]
    pub schema_id: Option<String>,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub image_sha256: Option<String>,
    pub replies: Vec<ScriptedReply>,
}

impl ScriptRule {
    pub fn for_role(role: ModelRole) -> Self {
        ScriptRule { role: Some(role), ..ScriptRule::default() }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn schema(mut self, schema_id: impl Into<String>) -> Self {
        self.schema_id = Some(schema_id.into());
        self
    }

    pub fn reply(mut self, reply: ScriptedReply) -> Self {
        self.replies.push(reply);
        self
    }

    fn matches(&self, req: &ProviderRequest<'_>, text: &str, image_hashes: &[String]) -> bool {
        self.role.is_none_or(|r| r == req.request.role)
            && self.schema_id.as_deref().is_none_or(|s| s == req.request.response_schema_id)
            && self.contains.as_deref().is_none_or(|c| text.contains(c))
            && self.image_sha256.as_deref().is_none_or(|h| image_hashes.iter().any(|x| x == h))
    }
}

/// A file of script rules, as referenced from the gateway configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

#[derive(Debug)]
pub struct MockChat {
    seed: u64,
    rules: Vec<ScriptRule>,
    cursors: Mutex<Vec<usize>>,
    transcript: Mutex<Vec<String>>,
}

impl MockChat {
    pub fn new(seed: u64) -> Self {
        MockChat { seed, rules: Vec::new(), cursors: Mutex::new(Vec::new()), transcript: Mutex::new(Vec::new()) }
    }

    pub fn with_rules(mut self, rules: Vec<ScriptRule>) -> Self {
        self.cursors = Mutex::new(vec![0; rules.len()]);
        self.rules = rules;
        self
    }

    /// Prompt text of every attempt seen so far, in arrival order.
    pub fn transcript(&self) -> Vec<String> {
        self.transcript.lock().expect("mock poisoned").clone()
    }

    fn scripted(&self, req: &ProviderRequest<'_>, text: &str, image_hashes: &[String]) -> Option<ScriptedReply> {
        let index = self.rules.iter().position(|r| r.matches(req, text, image_hashes))?;
        let rule = &self.rules[index];
        if rule.replies.is_empty() {
            return None;
        }
        let mut cursors = self.cursors.lock().expect("mock poisoned");
        let at = cursors[index].min(rule.replies.len() - 1);
        cursors[index] += 1;
        Some(rule.replies[at].clone())
    }
}

impl ChatProvider for MockChat {
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        let text = req.request.all_text();
        let image_hashes: Vec<String> = req
            .request
            .user_parts
            .iter()
            .filter_map(|p| match p {
                UserPart::Image(bytes) => Some(crate::ids::sha256_hex(bytes)),
                UserPart::Text(_) => None,
            })
            .collect();
        self.transcript.lock().expect("mock poisoned").push(text.clone());

        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(req.model.as_bytes());
        hasher.update(req.request.response_schema_id.as_bytes());
        hasher.update(text.as_bytes());
        for h in &image_hashes {
            hasher.update(h.as_bytes());
        }
        let digest: [u8; 32] = hasher.finalize().into();
        let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));

        let content = match self.scripted(req, &text, &image_hashes) {
            Some(ScriptedReply::Json(v)) => v.to_string(),
            Some(ScriptedReply::Raw(s)) => s,
            Some(ScriptedReply::TransportError) => {
                return Err(ProviderError::Transport("scripted transport error".into()))
            }
            Some(ScriptedReply::RateLimited) => return Err(ProviderError::RateLimited { retry_after: None }),
            Some(ScriptedReply::Fatal(m)) => return Err(ProviderError::Fatal(m)),
            None => synthesize(req, h).to_string(),
        };
        let input_tokens = text.chars().count().div_ceil(4) as u64 + IMAGE_TOKENS * image_hashes.len() as u64;
        let output_tokens = content.chars().count().div_ceil(4) as u64;
        // Synthetic latency between 0.2 s and 2.0 s.
        let latency = 0.2 + (h % 1801) as f64 / 1000.0;
        Ok(ProviderReply { content, input_tokens, output_tokens, latency: Some(latency) })
    }
}

/// The last text part, where callers put the item being processed.
fn subject(req: &ProviderRequest<'_>) -> String {
    req.request
        .user_parts
        .iter()
        .rev()
        .find_map(|p| match p {
            UserPart::Text(t) => Some(t.clone()),
            UserPart::Image(_) => None,
        })
        .unwrap_or_default()
}

fn synthesize(req: &ProviderRequest<'_>, h: u64) -> Value {
    let subject = subject(req);
    let images = req.request.image_count();
    match req.request.response_schema_id.as_str() {
        "split_criteria" => json!({ "criteria": split_heuristic(&subject) }),
        "retrieval_guidelines" => {
            let n = 1 + (h % 4) as usize;
            let words = salient_words(&subject);
            let guidelines: Vec<String> = (0..n)
                .map(|i| match words.get(i) {
                    Some(w) => format!("Pages documenting {w}"),
                    None => format!("Pages relevant to: {}", truncate_words(&subject, 12)),
                })
                .collect();
            json!({ "guidelines": guidelines })
        }
        "relevance_criterion" => json!({
            "patientRelevanceCriterion":
                format!("Patient has a documented condition addressed by: {}", truncate_words(&subject, 12))
        }),
        "criterion_domain" => json!({ "domain": domain_heuristic(&subject).as_str() }),
        "criterion_data_format" => {
            let structured = subject.chars().any(|c| c.is_ascii_digit() || "<>≤≥=%".contains(c));
            json!({ "requested_data_format": if structured { "Structured" } else { "Unstructured" } })
        }
        "criterion_temporal" => {
            let lower = subject.to_lowercase();
            let temporal = ["within", "past", "last", "prior", "month", "year", "week", "day", "before", "since"]
                .iter()
                .any(|w| lower.contains(w));
            json!({ "temporal_constraint": if temporal { "Yes" } else { "No" } })
        }
        "criterion_assessment" => {
            if req.request.role == ModelRole::RelevanceCheck {
                json!({ "rationale": format!("Synthetic relevance review of {images} page(s)."), "is_met": true })
            } else {
                let insufficient = h.is_multiple_of(7);
                json!({
                    "rationale": format!("Synthetic assessment of {images} page(s)."),
                    "is_met": !insufficient && (h >> 8).is_multiple_of(2),
                    "insufficient_information": insufficient,
                })
            }
        }
        "visual_elements" => {
            let elements: Vec<&str> = VisualElement::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| (h >> (8 + 3 * i)).is_multiple_of(4))
                .map(|(_, v)| v.as_str())
                .collect();
            json!({ "rationale": "Synthetic page inspection.", "visual_elements": elements })
        }
        "record_type" => json!({ "record_type": RecordType::ALL[(h % 4) as usize].as_str() }),
        other => json!({ "error": format!("no synthetic reply for schema {other}") }),
    }
}

fn truncate_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// Longest distinct words, longest first.
fn salient_words(text: &str) -> Vec<String> {
    let mut words: Vec<String> =
        text.split(|c: char| !c.is_alphanumeric()).filter(|w| w.chars().count() >= 4).map(str::to_lowercase).collect();
    words.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    words.dedup();
    words
}

fn split_heuristic(text: &str) -> Vec<Value> {
    let mut kind = "inclusion";
    let mut out = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lower = trimmed.to_lowercase();
        let is_header = trimmed.len() < 60 && lower.contains("criteria") || lower.ends_with(':') && trimmed.len() < 40;
        if is_header {
            if lower.contains("exclusion") {
                kind = "exclusion";
            } else if lower.contains("inclusion") {
                kind = "inclusion";
            }
            continue;
        }
        let body = trimmed.trim_start_matches(|c: char| c.is_ascii_digit() || "-*•.)".contains(c)).trim();
        if body.is_empty() {
            continue;
        }
        out.push(json!({ "kind": kind, "description": body, "explanation": format!("Taken from the {kind} list.") }));
    }
    out
}

fn domain_heuristic(text: &str) -> CriterionDomain {
    let lower = text.to_lowercase();
    let has = |words: &[&str]| words.iter().any(|w| lower.contains(w));
    if has(&["age", "years old", "consent", "sex", "gender", "insurance"]) {
        CriterionDomain::DemographicAdministrative
    } else if has(&["hba1c", "mg/dl", "creatinine", "level", "lab", "biomarker", "count"]) {
        CriterionDomain::LabOrBiomarker
    } else if has(&["ecog", "karnofsky", "performance", "ambulat", "speak", "language"]) {
        CriterionDomain::PerformanceOrFunctionalStatus
    } else if has(&["pregnan", "allerg", "risk", "unsafe", "contraindic"]) {
        CriterionDomain::SafetyOrRisk
    } else if has(&["treatment", "therapy", "drug", "medication", "taking", "insulin", "aspirin"]) {
        CriterionDomain::PriorOrConcomitantTreatments
    } else if has(&["history", "infarction", "abuse", "comorbid"]) {
        CriterionDomain::ComorbidityOrMedicalHistory
    } else if has(&["diagnos", "disease", "cancer", "diabetes", "condition"]) {
        CriterionDomain::DiseaseOrConditionSpecific
    } else {
        CriterionDomain::OtherPragmatic
    }
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dimension: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Self {
        MockEmbedder { seed, dimension: dimension.max(1) }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Unit vector expanded from SHA-256 in counter mode.
    pub fn vector_for(&self, kind: &[u8], bytes: &[u8]) -> Vec<f32> {
        let base = {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(kind);
            h.update(bytes);
            h.finalize()
        };
        let mut values = Vec::with_capacity(self.dimension);
        let mut counter = 0u32;
        while values.len() < self.dimension {
            let mut h = Sha256::new();
            h.update(base);
            h.update(counter.to_le_bytes());
            let block: [u8; 32] = h.finalize().into();
            for chunk in block.chunks_exact(4) {
                if values.len() == self.dimension {
                    break;
                }
                let x = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                values.push((x as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32);
            }
            counter += 1;
        }
        let norm = values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v = (*v as f64 / norm) as f32;
            }
        }
        values
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn embed(&self, _model: &str, inputs: &[EmbedInput]) -> Result<EmbedReply, ProviderError> {
        let mut tokens = 0u64;
        let vectors = inputs
            .iter()
            .map(|input| match input {
                EmbedInput::Image(bytes) => {
                    tokens += IMAGE_TOKENS;
                    self.vector_for(b"image", bytes)
                }
                EmbedInput::Text(text) => {
                    tokens += text.chars().count().div_ceil(4) as u64;
                    self.vector_for(b"text", text.as_bytes())
                }
            })
            .collect();
        Ok(EmbedReply { vectors, input_tokens: tokens, latency: Some(0.05 * inputs.len() as f64) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_heuristic_follows_headers() {
        let text = "Inclusion Criteria:\n- Age 18 or older\n- Type 2 diabetes\nExclusion Criteria:\n1. Pregnancy\n";
        let items = split_heuristic(text);
        let kinds: Vec<&str> = items.iter().map(|v| v["kind"].as_str().unwrap()).collect();
        assert_eq!(kinds, vec!["inclusion", "inclusion", "exclusion"]);
        assert_eq!(items[2]["description"], "Pregnancy");
    }

    #[test]
    fn embedder_is_unit_norm_and_stable() {
        let e = MockEmbedder::new(3, 16);
        let a = e.vector_for(b"text", b"hello");
        assert_eq!(a, e.vector_for(b"text", b"hello"));
        assert_ne!(a, e.vector_for(b"text", b"hellp"));
        let norm: f64 = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn domain_keywords() {
        assert_eq!(domain_heuristic("HbA1c between 7% and 10%"), CriterionDomain::LabOrBiomarker);
        assert_eq!(domain_heuristic("Speaks English"), CriterionDomain::PerformanceOrFunctionalStatus);
    }
}
