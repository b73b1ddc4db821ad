//! Every model call in the system goes through [`ModelGateway`]: chat,
//! vision chat, text and image embedding, and text-pair scoring.
//!
//! Backends implement a single [`ModelGateway::call`] entry point over a
//! [`GatewayRequest`]; the typed helpers (`chat`, `embed_text`, ...) validate
//! inputs and shape the response. Three backends ship:
//!
//! - [`MockGateway`]: deterministic, scripted, offline.
//! - [`OpenAiEndpoint`]: one OpenAI-compatible HTTP endpoint with retries.
//! - [`RoleRouter`]: binds each [`Role`] to a backend, with per-role
//!   concurrency limits and the cosine-of-embeddings scorer fallback.

mod mock;
mod openai;
mod router;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use mock::{hashed_embedding, FailureMode, MockGateway, MockRule, MockScript, ScoreEntry};
pub use openai::OpenAiEndpoint;
pub use router::{Backend, EndpointBinding, GatewayConfig, RetryPolicy, RoleRouter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Describer,
    Extractor,
    SaReasoner,
    CaReasoner,
    Embedder,
    Scorer,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Describer,
        Role::Extractor,
        Role::SaReasoner,
        Role::CaReasoner,
        Role::Embedder,
        Role::Scorer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Describer => "describer",
            Role::Extractor => "extractor",
            Role::SaReasoner => "sa_reasoner",
            Role::CaReasoner => "ca_reasoner",
            Role::Embedder => "embedder",
            Role::Scorer => "scorer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| GatewayError::Config(format!("unknown role `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Chat,
    VisionChat,
    EmbedText,
    EmbedImage,
    PairScore,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Chat => "chat",
            RequestKind::VisionChat => "vision_chat",
            RequestKind::EmbedText => "embed_text",
            RequestKind::EmbedImage => "embed_image",
            RequestKind::PairScore => "pair_score",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

/// One model call. Field order is part of the digest contract: the digest is
/// the SHA-256 of this struct's JSON serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRequest {
    pub kind: RequestKind,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub texts: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GatewayRequest {
    fn bare(kind: RequestKind, role: Role) -> Self {
        Self {
            kind,
            role,
            messages: Vec::new(),
            frames: Vec::new(),
            texts: Vec::new(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn chat(role: Role, messages: Vec<ChatMessage>) -> Self {
        Self { messages, ..Self::bare(RequestKind::Chat, role) }
    }

    pub fn vision_chat(role: Role, frames: Vec<String>, messages: Vec<ChatMessage>) -> Self {
        Self { messages, frames, ..Self::bare(RequestKind::VisionChat, role) }
    }

    pub fn embed_text(role: Role, texts: Vec<String>) -> Self {
        Self { texts, ..Self::bare(RequestKind::EmbedText, role) }
    }

    pub fn embed_image(role: Role, frames: Vec<String>) -> Self {
        Self { frames, ..Self::bare(RequestKind::EmbedImage, role) }
    }

    pub fn pair_score(role: Role, a: impl Into<String>, b: impl Into<String>) -> Self {
        Self { texts: vec![a.into(), b.into()], ..Self::bare(RequestKind::PairScore, role) }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Hex SHA-256 over the canonical JSON form. Stable across processes.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Text the mock's substring rules match against: message contents,
    /// then texts, then frame locators, newline separated.
    pub fn haystack(&self) -> String {
        let mut parts: Vec<&str> = self.messages.iter().map(|m| m.content.as_str()).collect();
        parts.extend(self.texts.iter().map(String::as_str));
        parts.extend(self.frames.iter().map(String::as_str));
        parts.join("\n")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        let empty = match self.kind {
            RequestKind::Chat => self.messages.is_empty(),
            RequestKind::VisionChat => self.frames.is_empty() || self.messages.is_empty(),
            RequestKind::EmbedText => self.texts.is_empty(),
            RequestKind::EmbedImage => self.frames.is_empty(),
            RequestKind::PairScore => self.texts.len() != 2,
        };
        if empty {
            return Err(GatewayError::InvalidRequest(format!(
                "{} request has an empty payload",
                self.kind.as_str()
            )));
        }
        if matches!(self.kind, RequestKind::EmbedText | RequestKind::PairScore)
            && self.texts.iter().any(|t| t.trim().is_empty())
        {
            return Err(GatewayError::EmptyText);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayResponse {
    Text(String),
    Vectors(Vec<Vec<f32>>),
    Score(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("{role}: request timed out after {attempts} attempt(s)")]
    Timeout { role: Role, attempts: u32 },
    #[error("{role}: HTTP {status} after {attempts} attempt(s): {body}")]
    Http { role: Role, status: u16, attempts: u32, body: String },
    #[error("{role}: authentication failed (HTTP {status})")]
    Auth { role: Role, status: u16 },
    #[error("{role}: transport error: {message}")]
    Transport { role: Role, message: String },
    #[error("frame locator cannot be resolved: {0}")]
    MissingFrames(String),
    #[error("empty text rejected")]
    EmptyText,
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("no scripted response for {kind} request to {role} (digest {digest})")]
    Unscripted { kind: &'static str, role: Role, digest: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Timeout { .. } | GatewayError::Transport { .. } => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Indices `round(linspace(0, n - 1, cap))` used to thin a frame list down to
/// an endpoint's image cap.
pub fn subsample_indices(n: usize, cap: usize) -> Vec<usize> {
    if cap == 0 || n == 0 {
        return Vec::new();
    }
    if n <= cap {
        return (0..n).collect();
    }
    if cap == 1 {
        return vec![0];
    }
    let step = (n - 1) as f64 / (cap - 1) as f64;
    (0..cap).map(|i| (i as f64 * step).round() as usize).collect()
}

pub fn subsample_frames(frames: &[String], cap: Option<usize>) -> Vec<String> {
    match cap {
        Some(cap) if frames.len() > cap => {
            log::info!("subsampling {} frames to endpoint cap {cap}", frames.len());
            subsample_indices(frames.len(), cap)
                .into_iter()
                .map(|i| frames[i].clone())
                .collect()
        }
        _ => frames.to_vec(),
    }
}

pub fn normalize(v: &mut [f32]) -> Result<(), GatewayError> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(GatewayError::Malformed("zero or non-finite embedding".into()));
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    Ok(())
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Chat inputs that are not part of the message list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { temperature: 0.0, seed: None, max_tokens: DEFAULT_MAX_TOKENS }
    }
}

impl Sampling {
    pub fn at(temperature: f64) -> Self {
        Self { temperature, ..Self::default() }
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn apply(self, mut req: GatewayRequest) -> GatewayRequest {
        req.temperature = self.temperature;
        req.seed = self.seed;
        req.max_tokens = self.max_tokens;
        req
    }
}

pub trait ModelGateway: Send + Sync {
    fn call(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError>;

    fn chat(&self, role: Role, messages: Vec<ChatMessage>, sampling: Sampling) -> Result<String, GatewayError> {
        let req = sampling.apply(GatewayRequest::chat(role, messages));
        req.validate()?;
        expect_text(self.call(&req)?)
    }

    fn vision_chat(
        &self,
        role: Role,
        frames: &[String],
        prompt: &str,
        sampling: Sampling,
    ) -> Result<String, GatewayError> {
        let req = sampling.apply(GatewayRequest::vision_chat(
            role,
            frames.to_vec(),
            vec![ChatMessage::user(prompt)],
        ));
        req.validate()?;
        expect_text(self.call(&req)?)
    }

    /// Unit-normalized embeddings, one per input text.
    fn embed_text(&self, role: Role, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let req = GatewayRequest::embed_text(role, texts.to_vec());
        req.validate()?;
        expect_vectors(self.call(&req)?, texts.len())
    }

    fn embed_image(&self, role: Role, frames: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let req = GatewayRequest::embed_image(role, frames.to_vec());
        req.validate()?;
        expect_vectors(self.call(&req)?, frames.len())
    }

    fn pair_score(&self, role: Role, a: &str, b: &str) -> Result<f64, GatewayError> {
        let req = GatewayRequest::pair_score(role, a, b);
        req.validate()?;
        match self.call(&req)? {
            GatewayResponse::Score(s) if s.is_finite() => Ok(s),
            other => Err(GatewayError::Malformed(format!("expected a score, got {other:?}"))),
        }
    }
}

impl<G: ModelGateway + ?Sized> ModelGateway for std::sync::Arc<G> {
    fn call(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        (**self).call(request)
    }
}

impl<G: ModelGateway + ?Sized> ModelGateway for &G {
    fn call(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        (**self).call(request)
    }
}

fn expect_text(resp: GatewayResponse) -> Result<String, GatewayError> {
    match resp {
        GatewayResponse::Text(t) => Ok(t),
        other => Err(GatewayError::Malformed(format!("expected text, got {other:?}"))),
    }
}

fn expect_vectors(resp: GatewayResponse, n: usize) -> Result<Vec<Vec<f32>>, GatewayError> {
    let mut vectors = match resp {
        GatewayResponse::Vectors(v) => v,
        other => return Err(GatewayError::Malformed(format!("expected vectors, got {other:?}"))),
    };
    if vectors.len() != n {
        return Err(GatewayError::Malformed(format!(
            "expected {n} vectors, got {}",
            vectors.len()
        )));
    }
    if let Some(first) = vectors.first() {
        let d = first.len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
            return Err(GatewayError::Dimension { expected: d, actual: bad.len() });
        }
    }
    for v in &mut vectors {
        normalize(v)?;
    }
    Ok(vectors)
}

/// Wraps a backend and counts calls per (kind, role).
pub struct CountingGateway<G> {
    inner: G,
    counts: Mutex<BTreeMap<(RequestKind, Role), u64>>,
}

impl<G: ModelGateway> CountingGateway<G> {
    pub fn new(inner: G) -> Self {
        Self { inner, counts: Mutex::new(BTreeMap::new()) }
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }

    pub fn total(&self) -> u64 {
        self.counts.lock().unwrap_or_else(|e| e.into_inner()).values().sum()
    }

    pub fn count(&self, kind: RequestKind, role: Role) -> u64 {
        self.counts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&(kind, role))
            .copied()
            .unwrap_or(0)
    }

    pub fn count_kind(&self, kind: RequestKind) -> u64 {
        self.counts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .map(|(_, c)| *c)
            .sum()
    }

    pub fn snapshot(&self) -> BTreeMap<(RequestKind, Role), u64> {
        self.counts.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn reset(&self) {
        self.counts.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }
}

impl<G: ModelGateway> ModelGateway for CountingGateway<G> {
    fn call(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        *self
            .counts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry((request.kind, request.role))
            .or_default() += 1;
        self.inner.call(request)
    }
}
