//! Deterministic scripted backend.
//!
//! Script file (JSON, every field optional):
//!
//! ```json
//! {
//!   "dimension": 64,
//!   "max_frames": 8,
//!   "unresolvable": ["missing://"],
//!   "default_score": null,
//!   "embeddings": { "raccoon: masked mammal": [0.1, 0.9] },
//!   "image_embeddings": { "file:///frames/0001.jpg": [1.0, 0.0] },
//!   "scores": [ { "a": "text one", "b": "text two", "score": 0.72 } ],
//!   "replies": { "<request digest hex>": "exact reply" },
//!   "rules": [
//!     { "kind": "vision_chat", "role": "describer", "contains": ["chunk-0007"], "reply": "desc-7" },
//!     { "role": "sa_reasoner", "contains": ["Question:"], "replies": ["Answer: A", "Answer: B"] },
//!     { "kind": "chat", "role": "describer", "echo_after": "Descriptions:\n" },
//!     { "role": "ca_reasoner", "fail": "http" }
//!   ],
//!   "fallback_reply": null
//! }
//! ```
//!
//! Chat and vision-chat resolution order: exact digest in `replies`, then the
//! first matching rule, then `fallback_reply`, else `Unscripted`. A rule
//! matches when its `kind`/`role`/`seed` (if given) equal the request's and
//! every `contains` substring occurs in the request haystack (message
//! contents, texts, frame locators joined by newlines). `replies` is indexed
//! by `seed % len` (seed 0 when absent). `echo_after` returns everything in
//! the haystack after the first occurrence of the marker.
//!
//! Text embeddings come from `embeddings` by exact text, otherwise from a
//! signed feature hash of the lowercase alphanumeric tokens into `dimension`
//! buckets. Image embeddings do the same keyed by locator. Pair scores come
//! from `scores` (symmetric), then `default_score`, then the cosine of the two
//! text embeddings.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    dot, normalize, subsample_frames, GatewayError, GatewayRequest, GatewayResponse, ModelGateway,
    RequestKind, Role,
};

fn default_dimension() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Timeout,
    Http,
    Auth,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RequestKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_after: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<FailureMode>,
}

impl MockRule {
    pub fn reply(role: Role, contains: &[&str], reply: impl Into<String>) -> Self {
        Self {
            role: Some(role),
            contains: contains.iter().map(|s| s.to_string()).collect(),
            reply: Some(reply.into()),
            ..Self::default()
        }
    }

    pub fn cycle(role: Role, contains: &[&str], replies: &[&str]) -> Self {
        Self {
            role: Some(role),
            contains: contains.iter().map(|s| s.to_string()).collect(),
            replies: replies.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn kind(mut self, kind: RequestKind) -> Self {
        self.kind = Some(kind);
        self
    }

    fn matches(&self, req: &GatewayRequest, haystack: &str) -> bool {
        self.kind.is_none_or(|k| k == req.kind)
            && self.role.is_none_or(|r| r == req.role)
            && self.seed.is_none_or(|s| Some(s) == req.seed)
            && self.contains.iter().all(|needle| haystack.contains(needle.as_str()))
    }

    fn respond(&self, req: &GatewayRequest, haystack: &str) -> Result<String, GatewayError> {
        if let Some(mode) = self.fail {
            return Err(match mode {
                FailureMode::Timeout => GatewayError::Timeout { role: req.role, attempts: 1 },
                FailureMode::Http => GatewayError::Http {
                    role: req.role,
                    status: 500,
                    attempts: 1,
                    body: "scripted failure".into(),
                },
                FailureMode::Auth => GatewayError::Auth { role: req.role, status: 401 },
            });
        }
        if let Some(marker) = &self.echo_after {
            return Ok(haystack
                .split_once(marker.as_str())
                .map(|(_, rest)| rest.to_string())
                .unwrap_or_default());
        }
        if !self.replies.is_empty() {
            let i = (req.seed.unwrap_or(0) % self.replies.len() as u64) as usize;
            return Ok(self.replies[i].clone());
        }
        Ok(self.reply.clone().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEntry {
    pub a: String,
    pub b: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub max_frames: Option<usize>,
    #[serde(default)]
    pub unresolvable: Vec<String>,
    #[serde(default)]
    pub default_score: Option<f64>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f32>>,
    #[serde(default)]
    pub image_embeddings: BTreeMap<String, Vec<f32>>,
    #[serde(default)]
    pub scores: Vec<ScoreEntry>,
    #[serde(default)]
    pub replies: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback_reply: Option<String>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            dimension: default_dimension(),
            max_frames: None,
            unresolvable: Vec::new(),
            default_score: None,
            embeddings: BTreeMap::new(),
            image_embeddings: BTreeMap::new(),
            scores: Vec::new(),
            replies: BTreeMap::new(),
            rules: Vec::new(),
            fallback_reply: None,
        }
    }
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("mock script {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Config(format!("mock script {}: {e}", path.display())))
    }
}

type Responder = Box<dyn Fn(&GatewayRequest) -> Option<Result<GatewayResponse, GatewayError>> + Send + Sync>;

/// Offline backend driven by a [`MockScript`] and optional programmatic
/// responders (tried first, in registration order).
pub struct MockGateway {
    script: MockScript,
    score_table: BTreeMap<(String, String), f64>,
    responders: Vec<Responder>,
    log: Option<Mutex<Vec<GatewayRequest>>>,
}

impl std::fmt::Debug for MockGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockGateway")
            .field("dimension", &self.script.dimension)
            .field("rules", &self.script.rules.len())
            .field("responders", &self.responders.len())
            .finish()
    }
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Signed feature-hash embedding of the lowercase alphanumeric tokens.
pub fn hashed_embedding(text: &str, dimension: usize) -> Vec<f32> {
    let mut v = vec![0.0f32; dimension.max(1)];
    let lower = text.to_lowercase();
    let mut any = false;
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = fnv1a(token.as_bytes());
        let idx = (h % v.len() as u64) as usize;
        v[idx] += if (h >> 40) & 1 == 0 { 1.0 } else { -1.0 };
        any = true;
    }
    if !any || v.iter().all(|&x| x == 0.0) {
        let h = fnv1a(text.as_bytes());
        let idx = (h % v.len() as u64) as usize;
        v[idx] = 1.0;
    }
    normalize(&mut v).expect("non-zero hashed embedding");
    v
}

impl MockGateway {
    pub fn new(script: MockScript) -> Self {
        let score_table = script
            .scores
            .iter()
            .map(|e| (pair_key(&e.a, &e.b), e.score))
            .collect();
        Self { script, score_table, responders: Vec::new(), log: None }
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        MockScript::load(path).map(Self::new)
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn dimension(&self) -> usize {
        self.script.dimension
    }

    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&GatewayRequest) -> Option<Result<GatewayResponse, GatewayError>> + Send + Sync + 'static,
    {
        self.responders.push(Box::new(f));
        self
    }

    /// Keeps a copy of every request for later inspection.
    pub fn recording(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn requests(&self) -> Vec<GatewayRequest> {
        self.log
            .as_ref()
            .map(|l| l.lock().unwrap_or_else(|e| e.into_inner()).clone())
            .unwrap_or_default()
    }

    pub fn text_embedding(&self, text: &str) -> Vec<f32> {
        match self.script.embeddings.get(text) {
            Some(v) => {
                let mut v = v.clone();
                normalize(&mut v).expect("scripted embedding is non-zero");
                v
            }
            None => hashed_embedding(text, self.script.dimension),
        }
    }

    fn image_embedding(&self, locator: &str) -> Vec<f32> {
        match self.script.image_embeddings.get(locator) {
            Some(v) => {
                let mut v = v.clone();
                normalize(&mut v).expect("scripted embedding is non-zero");
                v
            }
            None => hashed_embedding(locator, self.script.dimension),
        }
    }

    fn check_frames(&self, frames: &[String]) -> Result<(), GatewayError> {
        match frames
            .iter()
            .find(|f| self.script.unresolvable.iter().any(|p| f.starts_with(p.as_str())))
        {
            Some(bad) => Err(GatewayError::MissingFrames(bad.clone())),
            None => Ok(()),
        }
    }

    fn scripted_text(&self, req: &GatewayRequest) -> Result<String, GatewayError> {
        let digest = req.digest();
        if let Some(reply) = self.script.replies.get(&digest) {
            return Ok(reply.clone());
        }
        let haystack = req.haystack();
        if let Some(rule) = self.script.rules.iter().find(|r| r.matches(req, &haystack)) {
            return rule.respond(req, &haystack);
        }
        self.script.fallback_reply.clone().ok_or(GatewayError::Unscripted {
            kind: req.kind.as_str(),
            role: req.role,
            digest,
        })
    }

    fn score(&self, a: &str, b: &str) -> f64 {
        if let Some(s) = self.score_table.get(&pair_key(a, b)) {
            return *s;
        }
        if let Some(s) = self.script.default_score {
            return s;
        }
        if a == b {
            return 1.0;
        }
        dot(&self.text_embedding(a), &self.text_embedding(b)).clamp(-1.0, 1.0)
    }
}

impl ModelGateway for MockGateway {
    fn call(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        let mut req = request.clone();
        if req.kind == RequestKind::VisionChat {
            self.check_frames(&req.frames)?;
            req.frames = subsample_frames(&req.frames, self.script.max_frames);
        }
        if let Some(log) = &self.log {
            log.lock().unwrap_or_else(|e| e.into_inner()).push(req.clone());
        }
        for responder in &self.responders {
            if let Some(out) = responder(&req) {
                return out;
            }
        }
        match req.kind {
            RequestKind::Chat | RequestKind::VisionChat => self.scripted_text(&req).map(GatewayResponse::Text),
            RequestKind::EmbedText => Ok(GatewayResponse::Vectors(
                req.texts.iter().map(|t| self.text_embedding(t)).collect(),
            )),
            RequestKind::EmbedImage => {
                self.check_frames(&req.frames)?;
                Ok(GatewayResponse::Vectors(
                    req.frames.iter().map(|f| self.image_embedding(f)).collect(),
                ))
            }
            RequestKind::PairScore => Ok(GatewayResponse::Score(self.score(&req.texts[0], &req.texts[1]))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, Sampling};

    #[test]
    fn rule_reply_and_digest_reply() {
        let req = GatewayRequest::chat(Role::SaReasoner, vec![ChatMessage::user("exact prompt")]);
        let mut script = MockScript::default();
        script.replies.insert(req.digest(), "by digest".into());
        script.rules.push(MockRule::reply(Role::SaReasoner, &["prompt"], "by rule"));
        let gw = MockGateway::new(script);
        assert_eq!(
            gw.chat(Role::SaReasoner, vec![ChatMessage::user("exact prompt")], Sampling::default()).unwrap(),
            "by digest"
        );
        assert_eq!(
            gw.chat(Role::SaReasoner, vec![ChatMessage::user("other prompt")], Sampling::default()).unwrap(),
            "by rule"
        );
        assert!(matches!(
            gw.chat(Role::Describer, vec![ChatMessage::user("other prompt")], Sampling::default()),
            Err(GatewayError::Unscripted { .. })
        ));
    }

    #[test]
    fn replies_cycle_by_seed() {
        let mut script = MockScript::default();
        script.rules.push(MockRule::cycle(Role::SaReasoner, &[], &["A", "B"]));
        let gw = MockGateway::new(script);
        let got: Vec<String> = (0..4)
            .map(|s| gw.chat(Role::SaReasoner, vec![ChatMessage::user("q")], Sampling::at(0.6).seeded(s)).unwrap())
            .collect();
        assert_eq!(got, ["A", "B", "A", "B"]);
    }

    #[test]
    fn echo_after_returns_tail() {
        let mut script = MockScript::default();
        script.rules.push(MockRule {
            echo_after: Some("Descriptions:\n".into()),
            ..MockRule::default()
        });
        let gw = MockGateway::new(script);
        let out = gw
            .chat(Role::Describer, vec![ChatMessage::user("Summarize.\nDescriptions:\none\ntwo")], Sampling::default())
            .unwrap();
        assert_eq!(out, "one\ntwo");
    }

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let gw = MockGateway::new(MockScript::default());
        let v = gw.embed_text(Role::Embedder, &["a red car".into(), "a red car".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((dot(&v[0], &v[0]) - 1.0).abs() < 1e-6);
        assert_eq!(v[0].len(), 64);
        assert_eq!(gw.embed_text(Role::Embedder, &["".into()]), Err(GatewayError::EmptyText));
    }

    #[test]
    fn scores_are_symmetric_table_lookups() {
        let mut script = MockScript::default();
        script.scores.push(ScoreEntry { a: "a".into(), b: "b".into(), score: 0.72 });
        let gw = MockGateway::new(script);
        assert_eq!(gw.pair_score(Role::Scorer, "a", "b").unwrap(), 0.72);
        assert_eq!(gw.pair_score(Role::Scorer, "b", "a").unwrap(), 0.72);
        assert_eq!(gw.pair_score(Role::Scorer, "same text", "same text").unwrap(), 1.0);
    }

    #[test]
    fn unresolvable_frames_and_frame_cap() {
        let script = MockScript {
            max_frames: Some(8),
            unresolvable: vec!["missing://".into()],
            fallback_reply: Some("ok".into()),
            ..MockScript::default()
        };
        let gw = MockGateway::new(script).recording();
        let frames: Vec<String> = (0..20).map(|i| format!("file:///f{i:02}.jpg")).collect();
        assert_eq!(gw.vision_chat(Role::CaReasoner, &frames, "look", Sampling::default()).unwrap(), "ok");
        let sent = &gw.requests()[0].frames;
        let expected: Vec<String> = [0, 3, 5, 8, 11, 14, 16, 19].iter().map(|i| frames[*i].clone()).collect();
        assert_eq!(sent, &expected);
        let err = gw
            .vision_chat(Role::CaReasoner, &["missing://x".into()], "look", Sampling::default())
            .unwrap_err();
        assert_eq!(err, GatewayError::MissingFrames("missing://x".into()));
    }

    #[test]
    fn script_parses_documented_format() {
        let raw = r#"{
            "dimension": 8,
            "rules": [
                {"kind": "vision_chat", "role": "describer", "contains": ["chunk-0007"], "reply": "desc-7"},
                {"role": "ca_reasoner", "fail": "http"}
            ],
            "scores": [{"a": "x", "b": "y", "score": 0.5}]
        }"#;
        let script: MockScript = serde_json::from_str(raw).unwrap();
        assert_eq!(script.dimension, 8);
        assert_eq!(script.rules.len(), 2);
        assert!(serde_json::from_str::<MockScript>(r#"{"dimensions": 3}"#).is_err());
    }
}
