//! Uniform access to completion and embedding providers.
//!
//! The [`Gateway`] binds each [`ModelRole`] to a provider and model, enforces
//! structured outputs through schema validation with bounded repair retries,
//! retries transport failures with exponential backoff, and records every
//! provider attempt in a [`UsageLog`].

pub mod config;
pub mod http;
pub mod limiter;
pub mod mock;
pub mod schema;
pub mod usage;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};

pub use limiter::ProviderLimits;
pub use schema::{SchemaRegistry, StructuredOutput};
pub use usage::{
    usage_totals, AttemptOutcome, Cost, Price, UsageEntry, UsageFilter, UsageLog, UsageRecord, UsageSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Splitter,
    GuidelineGen,
    RelevanceGen,
    Classifier,
    RelevanceCheck,
    Assessor,
    Embedder,
}

impl ModelRole {
    pub const ALL: [ModelRole; 7] = [
        ModelRole::Splitter,
        ModelRole::GuidelineGen,
        ModelRole::RelevanceGen,
        ModelRole::Classifier,
        ModelRole::RelevanceCheck,
        ModelRole::Assessor,
        ModelRole::Embedder,
    ];

    /// Roles whose requests may carry page images. The classifier needs them
    /// for corpus profiling.
    pub fn accepts_images(&self) -> bool {
        matches!(self, ModelRole::Assessor | ModelRole::RelevanceCheck | ModelRole::Classifier)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelRole::Splitter => "splitter",
            ModelRole::GuidelineGen => "guideline_gen",
            ModelRole::RelevanceGen => "relevance_gen",
            ModelRole::Classifier => "classifier",
            ModelRole::RelevanceCheck => "relevance_check",
            ModelRole::Assessor => "assessor",
            ModelRole::Embedder => "embedder",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, PartialEq, Eq)]
pub enum UserPart {
    Text(String),
    /// PNG page image.
    Image(Arc<Vec<u8>>),
}

impl fmt::Debug for UserPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UserPart::Text(t) => f.debug_tuple("Text").field(t).finish(),
            UserPart::Image(b) => write!(f, "Image(<{} bytes>)", b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRequest {
    pub role: ModelRole,
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub response_schema_id: String,
    /// Ask the provider for its most deterministic decoding. Best effort on
    /// live providers.
    pub deterministic: bool,
}

impl ModelRequest {
    pub fn new(role: ModelRole, schema_id: &str, system_prompt: impl Into<String>) -> Self {
        ModelRequest {
            role,
            system_prompt: system_prompt.into(),
            user_parts: Vec::new(),
            response_schema_id: schema_id.to_string(),
            deterministic: true,
        }
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.user_parts.push(UserPart::Text(text.into()));
        self
    }

    pub fn image(mut self, png: Arc<Vec<u8>>) -> Self {
        self.user_parts.push(UserPart::Image(png));
        self
    }

    pub fn image_count(&self) -> usize {
        self.user_parts.iter().filter(|p| matches!(p, UserPart::Image(_))).count()
    }

    /// System prompt and text parts joined by newlines.
    pub fn all_text(&self) -> String {
        let mut out = self.system_prompt.clone();
        for part in &self.user_parts {
            if let UserPart::Text(t) = part {
                out.push('\n');
                out.push_str(t);
            }
        }
        out
    }
}

/// A dense embedding. Finite values, dimension fixed per embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, String> {
        if values.is_empty() {
            return Err("embedding has zero dimension".into());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("embedding component {i} is not finite"));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedInput {
    Image(Arc<Vec<u8>>),
    Text(String),
}

/// What a chat provider sees for one attempt.
pub struct ProviderRequest<'a> {
    pub model: &'a str,
    pub request: &'a ModelRequest,
    pub json_schema: &'a serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Latency reported by the provider itself, used instead of the measured
    /// wall time when present (the mock reports a synthetic latency so that
    /// runs are byte-reproducible).
    pub latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedReply {
    pub vectors: Vec<Vec<f32>>,
    pub input_tokens: u64,
    pub latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("provider rejected request: {0}")]
    Fatal(String),
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, model: &str, inputs: &[EmbedInput]) -> Result<EmbedReply, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts allowed for transport and rate-limit failures.
    pub max_attempts: u32,
    /// Repair attempts after a schema-invalid answer.
    pub max_schema_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, max_schema_retries: 2, base_delay_ms: 500, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        RetryPolicy { base_delay_ms: 0, max_delay_ms: 0, ..RetryPolicy::default() }
    }

    /// Delay before retry number `retry` (1-based): base * 2^(retry-1), capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("no provider bound to role {0}")]
    UnboundRole(ModelRole),
    #[error("role {0} is bound to the wrong kind of provider")]
    WrongBackend(ModelRole),
    #[error("response schema `{0}` is not registered")]
    UnknownSchema(String),
    #[error("request schema `{requested}` does not match expected `{expected}`")]
    SchemaMismatch { requested: String, expected: String },
    #[error("role {0} does not accept image inputs")]
    ImagesNotAllowed(ModelRole),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{role}: response failed schema `{schema}` after {attempts} attempts: {last_error}")]
    SchemaExhausted { role: ModelRole, schema: String, attempts: u32, last_error: String },
    #[error("{role}: transport failed after {attempts} attempts: {last_error}")]
    Transport { role: ModelRole, attempts: u32, last_error: String },
    #[error("{role}: provider rejected the request: {message}")]
    Fatal { role: ModelRole, message: String },
    #[error("{role}: invalid embedding response: {message}")]
    BadEmbedding { role: ModelRole, message: String },
}

impl GatewayError {
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

/// A validated structured answer.
#[derive(Debug, Clone)]
pub struct Completion<T> {
    pub value: T,
    pub usage: UsageRecord,
    /// Schema repair retries performed before the answer validated.
    pub retry_count: u32,
    /// Provider attempts, including transport retries.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedItemError {
    #[error("image could not be decoded: {0}")]
    UndecodableImage(String),
    #[error("embedding rejected: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct EmbedBatch {
    /// One entry per input, in input order.
    pub items: Vec<Result<EmbeddingVector, EmbedItemError>>,
    pub usage: UsageRecord,
}

#[derive(Clone)]
enum Backend {
    Chat(Arc<dyn ChatProvider>),
    Embedding { provider: Arc<dyn EmbeddingProvider>, dimension: Option<usize> },
}

#[derive(Clone)]
pub struct RoleBinding {
    model: String,
    backend: Backend,
    price: Price,
    retry: RetryPolicy,
    limits: Arc<ProviderLimits>,
}

impl RoleBinding {
    pub fn chat(model: impl Into<String>, provider: Arc<dyn ChatProvider>) -> Self {
        RoleBinding {
            model: model.into(),
            backend: Backend::Chat(provider),
            price: Price::default(),
            retry: RetryPolicy::default(),
            limits: Arc::new(ProviderLimits::unlimited()),
        }
    }

    pub fn embedding(model: impl Into<String>, provider: Arc<dyn EmbeddingProvider>, dimension: Option<usize>) -> Self {
        RoleBinding {
            model: model.into(),
            backend: Backend::Embedding { provider, dimension },
            price: Price::default(),
            retry: RetryPolicy::default(),
            limits: Arc::new(ProviderLimits::unlimited()),
        }
    }

    pub fn price(mut self, price: Price) -> Self {
        self.price = price;
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn limits(mut self, limits: Arc<ProviderLimits>) -> Self {
        self.limits = limits;
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Shareable across threads; all state is behind `Arc`s and locks.
#[derive(Clone)]
pub struct Gateway {
    roles: HashMap<ModelRole, RoleBinding>,
    schemas: Arc<SchemaRegistry>,
    log: Arc<UsageLog>,
    sleeper: Sleeper,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut roles: Vec<_> = self.roles.iter().map(|(r, b)| (r.as_str(), b.model.as_str())).collect();
        roles.sort();
        f.debug_struct("Gateway").field("roles", &roles).finish_non_exhaustive()
    }
}

pub struct GatewayBuilder {
    roles: HashMap<ModelRole, RoleBinding>,
    schemas: SchemaRegistry,
    log: Option<Arc<UsageLog>>,
    sleeper: Sleeper,
}

impl GatewayBuilder {
    pub fn bind(mut self, role: ModelRole, binding: RoleBinding) -> Self {
        self.roles.insert(role, binding);
        self
    }

    pub fn register_schema<T: StructuredOutput>(mut self) -> Self {
        self.schemas.register::<T>();
        self
    }

    pub fn usage_log(mut self, log: Arc<UsageLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            roles: self.roles,
            schemas: Arc::new(self.schemas),
            log: self.log.unwrap_or_else(|| Arc::new(UsageLog::in_memory())),
            sleeper: self.sleeper,
        }
    }
}

enum AttemptFailure {
    Retryable { outcome: AttemptOutcome, message: String, retry_after: Option<Duration> },
    Fatal(String),
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder {
            roles: HashMap::new(),
            schemas: SchemaRegistry::with_builtin(),
            log: None,
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    pub fn usage_log(&self) -> &Arc<UsageLog> {
        &self.log
    }

    pub fn binding(&self, role: ModelRole) -> Option<&RoleBinding> {
        self.roles.get(&role)
    }

    /// Sends `request` to the provider bound to its role and returns the
    /// answer parsed and validated as `T`.
    ///
    /// Schema-invalid answers are retried up to `max_schema_retries` times
    /// with the validation error appended to the prompt. Transport failures
    /// and rate limits back off exponentially up to `max_attempts` attempts.
    pub fn complete<T: StructuredOutput>(&self, request: &ModelRequest) -> Result<Completion<T>, GatewayError> {
        let role = request.role;
        let binding = self.roles.get(&role).ok_or(GatewayError::UnboundRole(role))?;
        let Backend::Chat(provider) = &binding.backend else {
            return Err(GatewayError::WrongBackend(role));
        };
        if request.response_schema_id != T::SCHEMA_ID {
            return Err(GatewayError::SchemaMismatch {
                requested: request.response_schema_id.clone(),
                expected: T::SCHEMA_ID.to_string(),
            });
        }
        let json_schema = self
            .schemas
            .get(&request.response_schema_id)
            .ok_or_else(|| GatewayError::UnknownSchema(request.response_schema_id.clone()))?;
        if request.image_count() > 0 && !role.accepts_images() {
            return Err(GatewayError::ImagesNotAllowed(role));
        }

        let call_id = self.log.next_call_id();
        let mut current = request.clone();
        let mut usage = UsageRecord::default();
        let mut attempts = 0u32;
        let mut transport_failures = 0u32;
        let mut repairs = 0u32;
        loop {
            attempts += 1;
            let started = Instant::now();
            let result = {
                let _permit = binding.limits.acquire();
                provider.complete(&ProviderRequest { model: &binding.model, request: &current, json_schema })
            };
            let measured = started.elapsed().as_secs_f64();
            let failure = match result {
                Ok(reply) => {
                    let wall_time = reply.latency.unwrap_or(measured);
                    let outcome = validate_reply::<T>(&reply.content);
                    let entry = self.record(
                        call_id,
                        role,
                        binding,
                        attempts,
                        if outcome.is_ok() { AttemptOutcome::Ok } else { AttemptOutcome::SchemaInvalid },
                        reply.input_tokens,
                        reply.output_tokens,
                        wall_time,
                    );
                    usage.add(&entry);
                    match outcome {
                        Ok(value) => return Ok(Completion { value, usage, retry_count: repairs, attempts }),
                        Err(message) => {
                            if repairs >= binding.retry.max_schema_retries {
                                return Err(GatewayError::SchemaExhausted {
                                    role,
                                    schema: T::SCHEMA_ID.to_string(),
                                    attempts,
                                    last_error: message,
                                });
                            }
                            repairs += 1;
                            current.user_parts.push(UserPart::Text(repair_note(&message)));
                            continue;
                        }
                    }
                }
                Err(ProviderError::Transport(message)) => {
                    AttemptFailure::Retryable { outcome: AttemptOutcome::Transport, message, retry_after: None }
                }
                Err(ProviderError::RateLimited { retry_after }) => AttemptFailure::Retryable {
                    outcome: AttemptOutcome::RateLimited,
                    message: "rate limited".into(),
                    retry_after,
                },
                Err(ProviderError::Fatal(message)) => AttemptFailure::Fatal(message),
            };
            match failure {
                AttemptFailure::Fatal(message) => {
                    self.record(call_id, role, binding, attempts, AttemptOutcome::Fatal, 0, 0, measured);
                    return Err(GatewayError::Fatal { role, message });
                }
                AttemptFailure::Retryable { outcome, message, retry_after } => {
                    let entry = self.record(call_id, role, binding, attempts, outcome, 0, 0, measured);
                    usage.add(&entry);
                    transport_failures += 1;
                    if transport_failures >= binding.retry.max_attempts {
                        return Err(GatewayError::Transport { role, attempts, last_error: message });
                    }
                    let delay = binding.retry.backoff(transport_failures);
                    (self.sleeper)(retry_after.map_or(delay, |r| r.max(delay)));
                }
            }
        }
    }

    /// Embeds page images. Undecodable images fail individually; the rest
    /// of the batch is still embedded.
    pub fn embed_images(&self, pages: &[Arc<Vec<u8>>]) -> Result<EmbedBatch, GatewayError> {
        if pages.is_empty() {
            return Err(GatewayError::Precondition("embed_images called with an empty list".into()));
        }
        let inputs: Vec<EmbedInput> = pages.iter().map(|p| EmbedInput::Image(p.clone())).collect();
        self.embed(&inputs)
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<EmbedBatch, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::Precondition("embed_texts called with an empty list".into()));
        }
        let inputs: Vec<EmbedInput> = texts.iter().map(|t| EmbedInput::Text(t.clone())).collect();
        self.embed(&inputs)
    }

    /// Embeds one text and returns its vector.
    pub fn embed_query(&self, text: &str) -> Result<(EmbeddingVector, UsageRecord), GatewayError> {
        let mut batch = self.embed_texts(&[text.to_string()])?;
        match batch.items.pop() {
            Some(Ok(v)) => Ok((v, batch.usage)),
            Some(Err(e)) => Err(GatewayError::BadEmbedding { role: ModelRole::Embedder, message: e.to_string() }),
            None => Err(GatewayError::BadEmbedding { role: ModelRole::Embedder, message: "empty batch".into() }),
        }
    }

    fn embed(&self, inputs: &[EmbedInput]) -> Result<EmbedBatch, GatewayError> {
        let role = ModelRole::Embedder;
        let binding = self.roles.get(&role).ok_or(GatewayError::UnboundRole(role))?;
        let Backend::Embedding { provider, dimension } = &binding.backend else {
            return Err(GatewayError::WrongBackend(role));
        };

        let mut items: Vec<Option<Result<EmbeddingVector, EmbedItemError>>> = vec![None; inputs.len()];
        let mut accepted = Vec::new();
        let mut accepted_idx = Vec::new();
        for (i, input) in inputs.iter().enumerate() {
            if let EmbedInput::Image(bytes) = input {
                if let Err(e) = image::load_from_memory(bytes) {
                    items[i] = Some(Err(EmbedItemError::UndecodableImage(e.to_string())));
                    continue;
                }
            }
            accepted.push(input.clone());
            accepted_idx.push(i);
        }

        let mut usage = UsageRecord::default();
        if !accepted.is_empty() {
            let call_id = self.log.next_call_id();
            let mut attempts = 0u32;
            let reply = loop {
                attempts += 1;
                let started = Instant::now();
                let result = {
                    let _permit = binding.limits.acquire();
                    provider.embed(&binding.model, &accepted)
                };
                let measured = started.elapsed().as_secs_f64();
                let (outcome, message, retry_after) = match result {
                    Ok(reply) => {
                        let entry = self.record(
                            call_id,
                            role,
                            binding,
                            attempts,
                            AttemptOutcome::Ok,
                            reply.input_tokens,
                            0,
                            reply.latency.unwrap_or(measured),
                        );
                        usage.add(&entry);
                        break reply;
                    }
                    Err(ProviderError::Transport(m)) => (AttemptOutcome::Transport, m, None),
                    Err(ProviderError::RateLimited { retry_after }) => {
                        (AttemptOutcome::RateLimited, "rate limited".to_string(), retry_after)
                    }
                    Err(ProviderError::Fatal(message)) => {
                        self.record(call_id, role, binding, attempts, AttemptOutcome::Fatal, 0, 0, measured);
                        return Err(GatewayError::Fatal { role, message });
                    }
                };
                let entry = self.record(call_id, role, binding, attempts, outcome, 0, 0, measured);
                usage.add(&entry);
                if attempts >= binding.retry.max_attempts {
                    return Err(GatewayError::Transport { role, attempts, last_error: message });
                }
                let delay = binding.retry.backoff(attempts);
                (self.sleeper)(retry_after.map_or(delay, |r| r.max(delay)));
            };
            if reply.vectors.len() != accepted.len() {
                return Err(GatewayError::BadEmbedding {
                    role,
                    message: format!("expected {} vectors, got {}", accepted.len(), reply.vectors.len()),
                });
            }
            let expected_dim = dimension.or_else(|| reply.vectors.first().map(Vec::len));
            for (idx, values) in accepted_idx.into_iter().zip(reply.vectors) {
                let item =
                    EmbeddingVector::new(values).map_err(EmbedItemError::Invalid).and_then(|v| match expected_dim {
                        Some(d) if d != v.dimension() => Err(EmbedItemError::Invalid(format!(
                            "dimension {} differs from expected {d}",
                            v.dimension()
                        ))),
                        _ => Ok(v),
                    });
                items[idx] = Some(item);
            }
        }
        Ok(EmbedBatch { items: items.into_iter().map(|i| i.expect("every input resolved")).collect(), usage })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        call_id: u64,
        role: ModelRole,
        binding: &RoleBinding,
        attempt: u32,
        outcome: AttemptOutcome,
        input_tokens: u64,
        output_tokens: u64,
        wall_time: f64,
    ) -> UsageRecord {
        let cost = binding.price.cost(input_tokens, output_tokens);
        self.log.append(UsageEntry {
            call_id,
            role,
            model: binding.model.clone(),
            attempt,
            outcome,
            at: Utc::now(),
            input_tokens,
            output_tokens,
            wall_time,
            price: binding.price,
            cost,
        });
        UsageRecord { input_tokens, output_tokens, wall_time, cost }
    }
}

fn validate_reply<T: StructuredOutput>(content: &str) -> Result<T, String> {
    schema::validate_as::<T>(content)
}

fn repair_note(error: &str) -> String {
    format!(
        "Your previous answer was rejected: {error}. Answer again with a single JSON object that follows the required format."
    )
}

#[cfg(test)]
mod tests {
    use super::mock::{MockChat, MockEmbedder, ScriptRule, ScriptedReply};
    use super::schema::AssessmentResponse;
    use super::*;
    use serde_json::json;

    fn gateway_with(rules: Vec<ScriptRule>, retry: RetryPolicy) -> Gateway {
        let chat = Arc::new(MockChat::new(7).with_rules(rules));
        Gateway::builder()
            .bind(ModelRole::Assessor, RoleBinding::chat("mock-reasoner", chat.clone()).retry(retry))
            .bind(ModelRole::Splitter, RoleBinding::chat("mock-chat", chat))
            .bind(
                ModelRole::Embedder,
                RoleBinding::embedding("mock-embed", Arc::new(MockEmbedder::new(7, 8)), Some(8)).retry(retry),
            )
            .sleeper(|_| {})
            .build()
    }

    fn assess_request() -> ModelRequest {
        ModelRequest::new(ModelRole::Assessor, AssessmentResponse::SCHEMA_ID, "assess").text("criterion")
    }

    fn png(seed: u8) -> Arc<Vec<u8>> {
        let img = image::GrayImage::from_fn(4, 4, |x, y| image::Luma([seed.wrapping_add((x * y) as u8)]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        Arc::new(out.into_inner())
    }

    #[test]
    fn scripted_reply_is_echoed() {
        let gw = gateway_with(
            vec![ScriptRule::for_role(ModelRole::Assessor)
                .reply(ScriptedReply::Json(json!({"is_met": true, "rationale": "HbA1c 7.2% on page 3"})))],
            RetryPolicy::no_delay(),
        );
        let done = gw.complete::<AssessmentResponse>(&assess_request()).unwrap();
        assert!(done.value.is_met);
        assert_eq!(done.retry_count, 0);
        assert_eq!(done.attempts, 1);
    }

    #[test]
    fn invalid_twice_then_valid_counts_two_retries() {
        let gw = gateway_with(
            vec![ScriptRule::for_role(ModelRole::Assessor)
                .reply(ScriptedReply::Raw("not json".into()))
                .reply(ScriptedReply::Json(json!({"is_met": "yes"})))
                .reply(ScriptedReply::Json(json!({"is_met": false, "rationale": "no MI recorded"})))],
            RetryPolicy { max_schema_retries: 3, ..RetryPolicy::no_delay() },
        );
        let done = gw.complete::<AssessmentResponse>(&assess_request()).unwrap();
        assert_eq!(done.retry_count, 2);
        assert!(!done.value.is_met);
        let entries = gw.usage_log().entries();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries.iter().filter(|e| e.outcome == AttemptOutcome::SchemaInvalid).count(), 2);
    }

    #[test]
    fn always_invalid_exhausts_schema_retries() {
        let gw = gateway_with(
            vec![ScriptRule::for_role(ModelRole::Assessor).reply(ScriptedReply::Raw("{}".into()))],
            RetryPolicy { max_schema_retries: 3, ..RetryPolicy::no_delay() },
        );
        match gw.complete::<AssessmentResponse>(&assess_request()) {
            Err(GatewayError::SchemaExhausted { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("expected schema exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn repair_note_is_appended_to_prompt() {
        let chat = Arc::new(MockChat::new(1).with_rules(vec![ScriptRule::for_role(ModelRole::Assessor)
            .reply(ScriptedReply::Raw("garbage".into()))
            .reply(ScriptedReply::Json(json!({"is_met": true, "rationale": "ok"})))]));
        let gw = Gateway::builder()
            .bind(ModelRole::Assessor, RoleBinding::chat("m", chat.clone()).retry(RetryPolicy::no_delay()))
            .build();
        gw.complete::<AssessmentResponse>(&assess_request()).unwrap();
        let seen = chat.transcript();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].contains("previous answer was rejected"));
        assert!(!seen[0].contains("previous answer was rejected"));
    }

    #[test]
    fn transport_failures_back_off_then_surface() {
        let delays = Arc::new(std::sync::Mutex::new(Vec::new()));
        let recorded = delays.clone();
        let chat = Arc::new(
            MockChat::new(1)
                .with_rules(vec![ScriptRule::for_role(ModelRole::Assessor).reply(ScriptedReply::TransportError)]),
        );
        let retry = RetryPolicy { max_attempts: 3, base_delay_ms: 100, max_delay_ms: 150, max_schema_retries: 0 };
        let gw = Gateway::builder()
            .bind(ModelRole::Assessor, RoleBinding::chat("m", chat).retry(retry))
            .sleeper(move |d| recorded.lock().unwrap().push(d))
            .build();
        let err = gw.complete::<AssessmentResponse>(&assess_request()).unwrap_err();
        assert!(err.is_transport());
        assert_eq!(*delays.lock().unwrap(), vec![Duration::from_millis(100), Duration::from_millis(150)]);
        assert_eq!(gw.usage_log().entries().len(), 3);
    }

    #[test]
    fn rate_limit_then_success() {
        let gw = gateway_with(
            vec![ScriptRule::for_role(ModelRole::Assessor)
                .reply(ScriptedReply::RateLimited)
                .reply(ScriptedReply::Json(json!({"is_met": true, "rationale": "ok"})))],
            RetryPolicy::no_delay(),
        );
        let done = gw.complete::<AssessmentResponse>(&assess_request()).unwrap();
        assert_eq!(done.attempts, 2);
        assert_eq!(done.retry_count, 0);
    }

    #[test]
    fn unknown_schema_and_images_are_rejected() {
        let gw = gateway_with(vec![], RetryPolicy::no_delay());
        let mut req = assess_request();
        req.response_schema_id = "other".into();
        assert!(matches!(gw.complete::<AssessmentResponse>(&req), Err(GatewayError::SchemaMismatch { .. })));

        let split = ModelRequest::new(ModelRole::Splitter, AssessmentResponse::SCHEMA_ID, "x").image(png(1));
        assert!(matches!(gw.complete::<AssessmentResponse>(&split), Err(GatewayError::ImagesNotAllowed(_))));
    }

    #[test]
    fn embed_three_pages_dim_eight() {
        let gw = gateway_with(vec![], RetryPolicy::no_delay());
        let batch = gw.embed_images(&[png(1), png(2), png(3)]).unwrap();
        assert_eq!(batch.items.len(), 3);
        for item in &batch.items {
            assert_eq!(item.as_ref().unwrap().dimension(), 8);
        }
    }

    #[test]
    fn identical_pages_embed_identically() {
        let gw = gateway_with(vec![], RetryPolicy::no_delay());
        let batch = gw.embed_images(&[png(9), png(9)]).unwrap();
        assert_eq!(batch.items[0].as_ref().unwrap(), batch.items[1].as_ref().unwrap());
    }

    #[test]
    fn empty_embed_list_is_a_precondition_error() {
        let gw = gateway_with(vec![], RetryPolicy::no_delay());
        assert!(matches!(gw.embed_images(&[]), Err(GatewayError::Precondition(_))));
    }

    #[test]
    fn undecodable_image_fails_alone() {
        let gw = gateway_with(vec![], RetryPolicy::no_delay());
        let batch = gw.embed_images(&[png(1), Arc::new(b"not an image".to_vec()), png(2)]).unwrap();
        assert!(batch.items[0].is_ok());
        assert!(matches!(batch.items[1], Err(EmbedItemError::UndecodableImage(_))));
        assert!(batch.items[2].is_ok());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { base_delay_ms: 100, max_delay_ms: 1000, ..RetryPolicy::default() };
        let delays: Vec<u64> = (1..=6).map(|n| p.backoff(n).as_millis() as u64).collect();
        assert_eq!(delays, vec![100, 200, 400, 800, 1000, 1000]);
    }
}
