//! HTTP providers: an OpenAI-compatible chat completions endpoint and a
//! multimodal embeddings endpoint that accepts base64 images and text.

use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::{
    ChatProvider, EmbedInput, EmbedReply, EmbeddingProvider, ProviderError, ProviderReply, ProviderRequest, UserPart,
};

const TIMEOUT: Duration = Duration::from_secs(300);

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(TIMEOUT)).build().into()
}

fn data_url(png: &[u8]) -> String {
    format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png))
}

/// Sends `body` and maps HTTP failures onto provider errors.
fn post_json(agent: &ureq::Agent, url: &str, api_key: Option<&str>, body: &Value) -> Result<Value, ProviderError> {
    let mut request = agent.post(url);
    if let Some(key) = api_key {
        request = request.header("Authorization", &format!("Bearer {key}"));
    }
    let mut response = request.send_json(body).map_err(|e| ProviderError::Transport(e.to_string()))?;
    let status = response.status().as_u16();
    let retry_after = response
        .headers()
        .get("retry-after")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<f64>().ok())
        .map(Duration::from_secs_f64);
    let text = response.body_mut().read_to_string().map_err(|e| ProviderError::Transport(e.to_string()))?;
    match status {
        200..=299 => {
            serde_json::from_str(&text).map_err(|e| ProviderError::Transport(format!("invalid JSON body: {e}")))
        }
        429 => Err(ProviderError::RateLimited { retry_after }),
        408 | 500..=599 => Err(ProviderError::Transport(format!("HTTP {status}: {}", snippet(&text)))),
        _ => Err(ProviderError::Fatal(format!("HTTP {status}: {}", snippet(&text)))),
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(300).collect()
}

#[derive(Debug, Clone)]
pub struct OpenAiChat {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiChat {
    /// `endpoint` is the API base, e.g. `https://api.openai.com/v1`.
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        OpenAiChat { endpoint: endpoint.into().trim_end_matches('/').to_string(), api_key, agent: agent() }
    }

    fn body(&self, req: &ProviderRequest<'_>) -> Value {
        let content: Vec<Value> = req
            .request
            .user_parts
            .iter()
            .map(|part| match part {
                UserPart::Text(t) => json!({"type": "text", "text": t}),
                UserPart::Image(png) => json!({"type": "image_url", "image_url": {"url": data_url(png)}}),
            })
            .collect();
        let mut body = json!({
            "model": req.model,
            "messages": [
                {"role": "system", "content": req.request.system_prompt},
                {"role": "user", "content": content},
            ],
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": req.request.response_schema_id, "schema": req.json_schema},
            },
        });
        if req.request.deterministic {
            body["seed"] = json!(0);
        }
        body
    }
}

impl ChatProvider for OpenAiChat {
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        let url = format!("{}/chat/completions", self.endpoint);
        let started = Instant::now();
        let reply = post_json(&self.agent, &url, self.api_key.as_deref(), &self.body(req))?;
        let content = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::Transport("response has no message content".into()))?
            .to_string();
        Ok(ProviderReply {
            content,
            input_tokens: reply["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            output_tokens: reply["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            latency: Some(started.elapsed().as_secs_f64()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct MultimodalEmbeddings {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl MultimodalEmbeddings {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        MultimodalEmbeddings { endpoint: endpoint.into().trim_end_matches('/').to_string(), api_key, agent: agent() }
    }
}

impl EmbeddingProvider for MultimodalEmbeddings {
    fn embed(&self, model: &str, inputs: &[EmbedInput]) -> Result<EmbedReply, ProviderError> {
        let items: Vec<Value> = inputs
            .iter()
            .map(|input| match input {
                EmbedInput::Image(png) => json!({"content": [{"type": "image_base64", "image_base64": data_url(png)}]}),
                EmbedInput::Text(t) => json!({"content": [{"type": "text", "text": t}]}),
            })
            .collect();
        let body = json!({"model": model, "inputs": items});
        let url = format!("{}/multimodalembeddings", self.endpoint);
        let started = Instant::now();
        let reply = post_json(&self.agent, &url, self.api_key.as_deref(), &body)?;
        let data = reply["data"].as_array().ok_or_else(|| ProviderError::Transport("response has no data".into()))?;
        let mut vectors = vec![Vec::new(); data.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().map_or(pos, |i| i as usize);
            let values = item["embedding"]
                .as_array()
                .ok_or_else(|| ProviderError::Transport("embedding is not an array".into()))?
                .iter()
                .map(|v| v.as_f64().map(|f| f as f32).unwrap_or(f32::NAN))
                .collect();
            if let Some(slot) = vectors.get_mut(index) {
                *slot = values;
            }
        }
        Ok(EmbedReply {
            vectors,
            input_tokens: reply["usage"]["total_tokens"].as_u64().unwrap_or(0),
            latency: Some(started.elapsed().as_secs_f64()),
        })
    }
}
