//! OpenAI-compatible HTTP backend.
//!
//! Routes, relative to `base_url`:
//! - `POST chat/completions` for chat and vision chat (images as
//!   `image_url` content parts);
//! - `POST embeddings` for text (`input: [string]`) and images
//!   (`input: [{"image": url}]`);
//! - `POST score` for text pairs (`text_1`, `text_2` → `data[0].score`).

use std::path::Path;
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::router::{EndpointBinding, RetryPolicy};
use super::{
    subsample_frames, GatewayError, GatewayRequest, GatewayResponse, ModelGateway, RequestKind, Role,
};

pub struct OpenAiEndpoint {
    role: Role,
    binding: EndpointBinding,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for OpenAiEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiEndpoint")
            .field("role", &self.role)
            .field("base_url", &self.binding.base_url)
            .field("model", &self.binding.model)
            .field("has_api_key", &self.api_key.is_some())
            .finish()
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/jpeg",
    }
}

/// Turns a locator into something an endpoint can fetch: URLs pass through,
/// local files are inlined as data URLs.
pub(crate) fn resolve_locator(locator: &str) -> Result<String, GatewayError> {
    if locator.starts_with("http://") || locator.starts_with("https://") || locator.starts_with("data:") {
        return Ok(locator.to_string());
    }
    let path = Path::new(locator.strip_prefix("file://").unwrap_or(locator));
    let bytes = std::fs::read(path).map_err(|_| GatewayError::MissingFrames(locator.to_string()))?;
    Ok(format!(
        "data:{};base64,{}",
        mime_for(path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

impl OpenAiEndpoint {
    pub fn new(role: Role, binding: EndpointBinding) -> Result<Self, GatewayError> {
        let base_url = binding
            .base_url
            .as_deref()
            .ok_or_else(|| GatewayError::Config(format!("role {role}: openai backend needs base_url")))?;
        if binding.model.is_none() {
            return Err(GatewayError::Config(format!("role {role}: openai backend needs model")));
        }
        let api_key = match &binding.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("role {role}: environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(binding.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(format!("role {role}: {e}")))?;
        log::debug!("role {role} bound to {base_url}");
        Ok(Self { role, binding, api_key, client })
    }

    fn url(&self, route: &str) -> String {
        let base = self.binding.base_url.as_deref().unwrap_or_default();
        format!("{}/{}", base.trim_end_matches('/'), route)
    }

    fn model(&self) -> &str {
        self.binding.model.as_deref().unwrap_or_default()
    }

    fn post_once(&self, route: &str, body: &Value, attempts: u32) -> Result<Value, GatewayError> {
        let mut req = self.client.post(self.url(route)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout { role: self.role, attempts }
            } else {
                GatewayError::Transport { role: self.role, message: e.to_string() }
            }
        })?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(GatewayError::Auth { role: self.role, status });
        }
        if !(200..300).contains(&status) {
            let body = resp.text().unwrap_or_default();
            return Err(GatewayError::Http { role: self.role, status, attempts, body });
        }
        resp.json::<Value>()
            .map_err(|e| GatewayError::Malformed(format!("{route}: {e}")))
    }

    /// POST with exponential backoff on retryable failures.
    fn post(&self, route: &str, body: &Value) -> Result<Value, GatewayError> {
        let policy: &RetryPolicy = &self.binding.retry;
        let mut attempt = 1;
        loop {
            match self.post_once(route, body, attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                    let delay = policy.backoff(attempt);
                    log::warn!("{}: attempt {attempt} failed ({e}); retrying in {delay:?}", self.role);
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn chat_body(&self, req: &GatewayRequest) -> Result<Value, GatewayError> {
        let mut messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| json!({ "role": m.role, "content": m.content }))
            .collect();
        if req.kind == RequestKind::VisionChat {
            let frames = subsample_frames(&req.frames, self.binding.max_frames);
            let mut parts = Vec::with_capacity(frames.len() + 1);
            for f in &frames {
                parts.push(json!({ "type": "image_url", "image_url": { "url": resolve_locator(f)? } }));
            }
            // Images go with the last user message.
            let idx = messages.len() - 1;
            let text = messages[idx]["content"].take();
            parts.push(json!({ "type": "text", "text": text }));
            messages[idx]["content"] = Value::Array(parts);
        }
        let mut body = json!({
            "model": self.model(),
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn parse_embeddings(v: &Value) -> Result<Vec<Vec<f32>>, GatewayError> {
        let data = v["data"]
            .as_array()
            .ok_or_else(|| GatewayError::Malformed("embeddings response lacks data".into()))?;
        let mut rows: Vec<(u64, Vec<f32>)> = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().unwrap_or(i as u64);
            let vec = item["embedding"]
                .as_array()
                .ok_or_else(|| GatewayError::Malformed("embedding is not an array".into()))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| GatewayError::Malformed("embedding has non-numeric entries".into()))?;
            rows.push((index, vec));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

impl ModelGateway for OpenAiEndpoint {
    fn call(&self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        match req.kind {
            RequestKind::Chat | RequestKind::VisionChat => {
                let body = self.chat_body(req)?;
                let v = self.post("chat/completions", &body)?;
                v["choices"][0]["message"]["content"]
                    .as_str()
                    .map(|s| GatewayResponse::Text(s.to_string()))
                    .ok_or_else(|| GatewayError::Malformed("completion lacks message content".into()))
            }
            RequestKind::EmbedText => {
                let body = json!({ "model": self.model(), "input": req.texts });
                let v = self.post("embeddings", &body)?;
                Self::parse_embeddings(&v).map(GatewayResponse::Vectors)
            }
            RequestKind::EmbedImage => {
                let inputs = req
                    .frames
                    .iter()
                    .map(|f| resolve_locator(f).map(|url| json!({ "image": url })))
                    .collect::<Result<Vec<_>, _>>()?;
                let body = json!({ "model": self.model(), "input": inputs });
                let v = self.post("embeddings", &body)?;
                Self::parse_embeddings(&v).map(GatewayResponse::Vectors)
            }
            RequestKind::PairScore => {
                let body = json!({ "model": self.model(), "text_1": req.texts[0], "text_2": req.texts[1] });
                let v = self.post("score", &body)?;
                v["data"][0]["score"]
                    .as_f64()
                    .or_else(|| v["score"].as_f64())
                    .map(GatewayResponse::Score)
                    .ok_or_else(|| GatewayError::Malformed("score response lacks a score".into()))
            }
        }
    }
}
