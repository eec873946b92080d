//! Gateway configuration file (TOML).
//!
//! ```toml
//! mode = "live"
//!
//! [providers.openai]
//! kind = "openai"
//! endpoint = "https://api.openai.com/v1"
//! api_key_env = "OPENAI_API_KEY"
//! max_in_flight = 8
//!
//! [roles.assessor]
//! provider = "openai"
//! model = "o1"
//! price = { input_per_million = 15.0, output_per_million = 60.0 }
//! ```
//!
//! In `mock` mode every role is served by the deterministic mock providers;
//! models and prices from `[roles]` still apply to usage accounting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::http::{MultimodalEmbeddings, OpenAiChat};
use super::mock::{MockChat, MockEmbedder, MockScript, ScriptRule};
use super::{
    ChatProvider, EmbeddingProvider, Gateway, ModelRole, Price, ProviderLimits, RetryPolicy, RoleBinding, UsageLog,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingKey(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Live,
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Openai,
    MultimodalEmbeddings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PriceConfig {
    #[serde(default)]
    pub input_per_million: f64,
    #[serde(default)]
    pub output_per_million: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleConfig {
    #[serde(default)]
    pub provider: Option<String>,
    pub model: String,
    #[serde(default)]
    pub price: PriceConfig,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
    /// Expected embedding dimension; embedder only.
    #[serde(default)]
    pub dimension: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// JSON file of script rules, relative to the config file.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Rules checked before those of `script`.
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

fn default_dimension() -> usize {
    64
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig { seed: 0, dimension: default_dimension(), script: None, rules: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderConfig>,
    #[serde(default)]
    pub roles: BTreeMap<ModelRole, RoleConfig>,
    #[serde(default)]
    pub mock: MockConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut config: GatewayConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn mock(seed: u64) -> Self {
        GatewayConfig { mock: MockConfig { seed, ..MockConfig::default() }, ..GatewayConfig::default() }
    }

    /// Builds a gateway. `seed` overrides the configured mock seed.
    pub fn build(&self, seed: Option<u64>, log: Arc<UsageLog>) -> Result<Gateway, ConfigError> {
        let mut builder = Gateway::builder().usage_log(log);
        match self.mode {
            Mode::Mock => {
                let seed = seed.unwrap_or(self.mock.seed);
                let mut rules = self.mock.rules.clone();
                rules.extend(match &self.mock.script {
                    Some(path) => {
                        let path = self.base_dir.join(path);
                        let text = std::fs::read_to_string(&path)
                            .map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                        let script: MockScript = serde_json::from_str(&text)
                            .map_err(|e| ConfigError::Parse { path, message: e.to_string() })?;
                        script.rules
                    }
                    None => Vec::new(),
                });
                let chat: Arc<dyn ChatProvider> = Arc::new(MockChat::new(seed).with_rules(rules));
                let embedder = Arc::new(MockEmbedder::new(seed, self.mock.dimension));
                for role in ModelRole::ALL {
                    let configured = self.roles.get(&role);
                    let model = configured.map_or_else(|| format!("mock-{role}"), |r| r.model.clone());
                    let binding = if role == ModelRole::Embedder {
                        RoleBinding::embedding(model, embedder.clone(), Some(self.mock.dimension))
                    } else {
                        RoleBinding::chat(model, chat.clone())
                    };
                    // Mock failures are scripted, so waiting between retries buys nothing.
                    let binding = binding.retry(RetryPolicy::no_delay());
                    builder = builder.bind(role, finish_binding(binding, configured, None));
                }
            }
            Mode::Live => {
                let mut limits: BTreeMap<&str, Arc<ProviderLimits>> = BTreeMap::new();
                for (name, p) in &self.providers {
                    limits.insert(name, Arc::new(ProviderLimits::new(p.max_in_flight, p.requests_per_second)));
                }
                for (role, rc) in &self.roles {
                    let name = rc
                        .provider
                        .as_deref()
                        .ok_or_else(|| ConfigError::Invalid(format!("role {role} has no provider")))?;
                    let p = self
                        .providers
                        .get(name)
                        .ok_or_else(|| ConfigError::Invalid(format!("role {role} uses unknown provider {name}")))?;
                    let key = match &p.api_key_env {
                        Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingKey(var.clone()))?),
                        None => None,
                    };
                    let binding = match (p.kind, *role == ModelRole::Embedder) {
                        (ProviderKind::Openai, false) => {
                            RoleBinding::chat(rc.model.clone(), Arc::new(OpenAiChat::new(p.endpoint.clone(), key)))
                        }
                        (ProviderKind::MultimodalEmbeddings, true) => {
                            let provider: Arc<dyn EmbeddingProvider> =
                                Arc::new(MultimodalEmbeddings::new(p.endpoint.clone(), key));
                            RoleBinding::embedding(rc.model.clone(), provider, rc.dimension)
                        }
                        _ => return Err(ConfigError::Invalid(format!("provider {name} cannot serve role {role}"))),
                    };
                    builder = builder.bind(*role, finish_binding(binding, Some(rc), limits.get(name).cloned()));
                }
            }
        }
        Ok(builder.build())
    }
}

fn finish_binding(binding: RoleBinding, rc: Option<&RoleConfig>, limits: Option<Arc<ProviderLimits>>) -> RoleBinding {
    let mut binding = binding;
    if let Some(rc) = rc {
        binding = binding.price(Price::per_million(rc.price.input_per_million, rc.price.output_per_million));
        if let Some(retry) = rc.retry {
            binding = binding.retry(retry);
        }
    }
    if let Some(limits) = limits {
        binding = binding.limits(limits);
    }
    binding
}
