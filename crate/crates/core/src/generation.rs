//! Answer sampling and consistency scoring.
//!
//! Every answer leaf is sampled `n` times with chain-of-thought prompting. Each
//! distinct answer is scored by how often it occurs (agreement) and how
//! similar the reasoning traces that produced it are to one another
//! (coherence); the final score blends the two with weight `lambda`. When the
//! best leaves disagree, their frames are shown to the vision reasoner and the
//! same procedure picks among the refined answers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent_search::{SaLeaf, SearchResult, TraceRecord};
use crate::ekg::{EventGraph, EventId};
use crate::gateway::{ChatMessage, GatewayError, ModelGateway, Role, Sampling};
use crate::index_store::{fetch_frames, StoreError};
use crate::prompts::{PromptError, PromptSet};

pub const INSUFFICIENT_EVIDENCE: &str = "insufficient evidence";
pub const UNPARSEABLE: &str = "<unparseable>";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation configuration: {0}")]
    Config(String),
    #[error("the search produced no answer leaves")]
    NoLeaves,
    #[error("{source}")]
    Gateway {
        #[source]
        source: GatewayError,
        partial_audit: Box<AuditLog>,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("writing audit log {path}: {message}")]
    Audit { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub ca_top_m: usize,
    /// Sample `i` is drawn with seed `seed + i`.
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { n_samples: 8, temperature: 0.6, lambda: 0.3, ca_top_m: 2, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.n_samples == 0 {
            return Err(GenerationError::Config("n_samples must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(GenerationError::Config("lambda must lie in [0, 1]".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GenerationError::Config("temperature must lie in [0, 2]".into()));
        }
        if self.ca_top_m == 0 {
            return Err(GenerationError::Config("ca_top_m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub answer: String,
    pub trace: String,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    pub answer: String,
    pub k: usize,
    /// Share of samples giving this answer.
    pub agreement: f64,
    /// Mean pairwise similarity of this answer's traces.
    pub coherence: f64,
    pub final_score: f64,
}

/// Whether the query lists lettered options such as `(A) ...` or `B. ...`.
pub fn is_multiple_choice(query: &str) -> bool {
    let paren = ('A'..='D').filter(|c| query.contains(&format!("({c})"))).count();
    let dotted = query
        .lines()
        .filter(|l| {
            let l = l.trim_start().as_bytes();
            l.len() >= 2 && l[0].is_ascii_uppercase() && (l[1] == b'.' || l[1] == b')')
        })
        .count();
    paren >= 2 || dotted >= 2
}

fn option_letter(answer: &str) -> Option<char> {
    let s = answer.trim().trim_start_matches(['(', '[']);
    let mut chars = s.chars();
    let c = chars.next()?;
    if !c.is_ascii_alphabetic() {
        return None;
    }
    match chars.next() {
        None => Some(c.to_ascii_uppercase()),
        Some(')' | ']' | '.' | ':' | ',' | ' ') => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

/// Trims, case-folds and strips trailing punctuation; for multiple-choice
/// queries reduces the answer to its option letter when one is present.
pub fn canonicalize(raw: &str, multiple_choice: bool) -> Option<String> {
    let trimmed = raw.trim().trim_matches(['"', '\'', '*', '`']).trim();
    if multiple_choice {
        if let Some(c) = option_letter(trimmed) {
            return Some(c.to_string());
        }
    }
    let folded = trimmed.to_lowercase();
    let folded = folded.trim_end_matches(['.', '!', '?', ';', ',', ':']).trim();
    (!folded.is_empty()).then(|| folded.to_string())
}

/// Splits a completion into reasoning and the final `Answer:` line.
pub fn parse_cot(text: &str, multiple_choice: bool) -> (Option<String>, String) {
    let lines: Vec<&str> = text.lines().collect();
    let found = lines.iter().enumerate().rev().find_map(|(i, l)| {
        let t = l.trim().trim_start_matches(['*', '#', ' ']);
        let lower = t.to_ascii_lowercase();
        lower.starts_with("answer:").then(|| (i, t["answer:".len()..].to_string()))
    });
    match found {
        Some((i, answer)) => (canonicalize(&answer, multiple_choice), lines[..i].join("\n").trim().to_string()),
        None => (None, text.trim().to_string()),
    }
}

pub fn to_candidate(text: &str, sample_index: usize, multiple_choice: bool) -> CandidateAnswer {
    let (answer, trace) = parse_cot(text, multiple_choice);
    CandidateAnswer { answer: answer.unwrap_or_else(|| UNPARSEABLE.to_string()), trace, sample_index }
}

/// Scores each distinct answer. `pair_score` is called once per unordered
/// pair of traces sharing an answer; traces are sorted first so the result
/// does not depend on candidate order.
pub fn score_answers_with<E>(
    candidates: &[CandidateAnswer],
    lambda: f64,
    mut pair_score: impl FnMut(&str, &str) -> Result<f64, E>,
) -> Result<Vec<ConsistencyScore>, E> {
    let n = candidates.len();
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for c in candidates {
        groups.entry(c.answer.as_str()).or_default().push(c.trace.as_str());
    }
    let mut out = Vec::with_capacity(groups.len());
    for (answer, mut traces) in groups {
        traces.sort_unstable();
        let k = traces.len();
        let agreement = k as f64 / n as f64;
        let coherence = if k < 2 {
            0.0
        } else {
            let mut sum = 0.0;
            for i in 0..k {
                for j in i + 1..k {
                    sum += pair_score(traces[i], traces[j])?;
                }
            }
            2.0 * sum / (k * (k - 1)) as f64
        };
        out.push(ConsistencyScore {
            answer: answer.to_string(),
            k,
            agreement,
            coherence,
            final_score: lambda * agreement + (1.0 - lambda) * coherence,
        });
    }
    Ok(out)
}

/// Trace similarity through the scorer role. Empty traces carry no
/// reasoning to compare and score 0.
pub fn score_answers(
    gateway: &dyn ModelGateway,
    candidates: &[CandidateAnswer],
    config: &GenerationConfig,
) -> Result<Vec<ConsistencyScore>, GatewayError> {
    score_answers_with(candidates, config.lambda, |a, b| {
        if a.trim().is_empty() || b.trim().is_empty() {
            Ok(0.0)
        } else {
            gateway.pair_score(Role::Scorer, a, b)
        }
    })
}

fn better(a: &ConsistencyScore, b: &ConsistencyScore) -> std::cmp::Ordering {
    a.final_score
        .total_cmp(&b.final_score)
        .then_with(|| a.agreement.total_cmp(&b.agreement))
        .then_with(|| b.answer.cmp(&a.answer))
}

/// Highest final score, then higher agreement, then the smaller answer.
/// Unparseable answers only win when nothing else was produced.
pub fn select_best(scores: &[ConsistencyScore]) -> Option<&ConsistencyScore> {
    let parsed = scores.iter().filter(|s| s.answer != UNPARSEABLE).max_by(|a, b| better(a, b));
    parsed.or_else(|| scores.iter().max_by(|a, b| better(a, b)))
}

/// Draws `n` chain-of-thought samples for one prompt.
pub fn sample_answers(
    gateway: &dyn ModelGateway,
    role: Role,
    prompt: &str,
    frames: Option<&[String]>,
    multiple_choice: bool,
    config: &GenerationConfig,
) -> Result<Vec<CandidateAnswer>, GatewayError> {
    (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let sampling = Sampling::at(config.temperature).seeded(config.seed + i as u64);
            let text = match frames {
                Some(f) => gateway.vision_chat(role, f, prompt, sampling)?,
                None => gateway.chat(role, vec![ChatMessage::user(prompt)], sampling)?,
            };
            Ok(to_candidate(&text, i, multiple_choice))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeOutcome {
    pub node_id: String,
    pub event_ids: Vec<EventId>,
    pub low_confidence: bool,
    pub candidates: Vec<CandidateAnswer>,
    pub scores: Vec<ConsistencyScore>,
    pub best: ConsistencyScore,
}

fn sentinel_outcome(leaf: &SaLeaf, config: &GenerationConfig) -> NodeOutcome {
    let candidates: Vec<CandidateAnswer> = (0..config.n_samples)
        .map(|i| CandidateAnswer { answer: INSUFFICIENT_EVIDENCE.into(), trace: String::new(), sample_index: i })
        .collect();
    let scores = score_answers_with(&candidates, config.lambda, |_, _| Ok::<_, GatewayError>(0.0))
        .expect("constant scorer");
    NodeOutcome {
        node_id: leaf.node_id.clone(),
        event_ids: leaf.event_ids.clone(),
        low_confidence: true,
        candidates,
        best: scores[0].clone(),
        scores,
    }
}

/// Samples and scores one answer leaf. A leaf without events answers with
/// the insufficient-evidence sentinel and makes no model calls.
pub fn answer_leaf(
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    leaf: &SaLeaf,
    query: &str,
    config: &GenerationConfig,
) -> Result<NodeOutcome, GenerationError> {
    if leaf.low_confidence || leaf.context_text.trim().is_empty() {
        return Ok(sentinel_outcome(leaf, config));
    }
    let prompt = prompts.render("answer", &[("context", &leaf.context_text), ("query", query)])?;
    let mc = is_multiple_choice(query);
    let gw_err = |source| GenerationError::Gateway { source, partial_audit: Box::default() };
    let candidates = sample_answers(gateway, Role::SaReasoner, &prompt, None, mc, config).map_err(gw_err)?;
    let scores = score_answers(gateway, &candidates, config).map_err(gw_err)?;
    let best = select_best(&scores).expect("at least one sample").clone();
    Ok(NodeOutcome {
        node_id: leaf.node_id.clone(),
        event_ids: leaf.event_ids.clone(),
        low_confidence: false,
        candidates,
        scores,
        best,
    })
}

/// Orders nodes by their best score; low-confidence nodes go last.
pub fn rank_nodes(outcomes: &[NodeOutcome]) -> Vec<&NodeOutcome> {
    let mut v: Vec<&NodeOutcome> = outcomes.iter().collect();
    v.sort_by(|a, b| {
        a.low_confidence
            .cmp(&b.low_confidence)
            .then_with(|| better(&b.best, &a.best))
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    v
}

/// The highest-ranked node for each distinct answer, up to `m` of them.
pub fn differing_top<'a>(ranked: &[&'a NodeOutcome], m: usize) -> Vec<&'a NodeOutcome> {
    let mut picked: Vec<&NodeOutcome> = Vec::new();
    for n in ranked {
        if picked.len() == m {
            break;
        }
        if !picked.iter().any(|p| p.best.answer == n.best.answer) {
            picked.push(n);
        }
    }
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaNodeOutcome {
    pub node_id: String,
    pub frames: usize,
    pub candidates: Vec<CandidateAnswer>,
    pub scores: Vec<ConsistencyScore>,
    pub best: ConsistencyScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CaOutcome {
    /// All candidate nodes agreed; no frames were checked.
    Skipped,
    Completed { nodes: Vec<CaNodeOutcome> },
    /// Frame checking failed; the best leaf answer stands.
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub answer: String,
    pub score: f64,
    pub from_node: String,
    pub degraded: bool,
    pub ca: CaOutcome,
}

fn ca_node(
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    graph: &EventGraph,
    node: &NodeOutcome,
    query: &str,
    config: &GenerationConfig,
) -> Result<CaNodeOutcome, String> {
    let frames = fetch_frames(graph, &node.event_ids).map_err(|e: StoreError| e.to_string())?;
    if frames.is_empty() {
        return Err(GatewayError::MissingFrames(format!("no frames for node {}", node.node_id)).to_string());
    }
    let locators: Vec<String> = frames.iter().map(|f| f.locator.clone()).collect();
    let context = crate::agent_search::context_text(graph, &node.event_ids);
    let prompt = prompts
        .render("check_frames", &[("context", &context), ("query", query)])
        .map_err(|e| e.to_string())?;
    let mc = is_multiple_choice(query);
    let candidates = sample_answers(gateway, Role::CaReasoner, &prompt, Some(&locators), mc, config)
        .map_err(|e| e.to_string())?;
    let scores = score_answers(gateway, &candidates, config).map_err(|e| e.to_string())?;
    let best = select_best(&scores).expect("at least one sample").clone();
    Ok(CaNodeOutcome { node_id: node.node_id.clone(), frames: locators.len(), candidates, scores, best })
}

/// Re-answers the top differing nodes from their frames. Skipped when the
/// top nodes agree; falls back to the best leaf answer on failure.
pub fn check_frames_answer(
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    graph: &EventGraph,
    outcomes: &[NodeOutcome],
    query: &str,
    config: &GenerationConfig,
) -> Result<FinalAnswer, GenerationError> {
    let ranked = rank_nodes(outcomes);
    let top = *ranked.first().ok_or(GenerationError::NoLeaves)?;
    let fallback = |ca: CaOutcome, degraded: bool| FinalAnswer {
        answer: top.best.answer.clone(),
        score: top.best.final_score,
        from_node: top.node_id.clone(),
        degraded,
        ca,
    };
    let picked: Vec<&NodeOutcome> =
        differing_top(&ranked, config.ca_top_m).into_iter().filter(|n| !n.low_confidence).collect();
    if picked.len() < 2 {
        return Ok(fallback(CaOutcome::Skipped, false));
    }
    let results: Vec<Result<CaNodeOutcome, String>> =
        picked.par_iter().map(|n| ca_node(gateway, prompts, graph, n, query, config)).collect();
    let nodes = match results.into_iter().collect::<Result<Vec<_>, _>>() {
        Ok(nodes) => nodes,
        Err(error) => {
            log::warn!("frame check failed, keeping the best leaf answer: {error}");
            return Ok(fallback(CaOutcome::Failed { error }, true));
        }
    };
    let winner = nodes
        .iter()
        .filter(|n| n.best.answer != UNPARSEABLE)
        .max_by(|a, b| better(&a.best, &b.best).then_with(|| b.node_id.cmp(&a.node_id)))
        .or_else(|| nodes.first())
        .expect("two nodes were checked");
    Ok(FinalAnswer {
        answer: winner.best.answer.clone(),
        score: winner.best.final_score,
        from_node: winner.node_id.clone(),
        degraded: false,
        ca: CaOutcome::Completed { nodes: nodes.clone() },
    })
}

/// Structured record of one query. Serializes to one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub query: String,
    pub config: Option<GenerationConfig>,
    pub search_trace: Vec<TraceRecordOwned>,
    pub leaves: Vec<NodeOutcome>,
    pub final_answer: Option<FinalAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecordOwned {
    pub node_id: String,
    pub depth: usize,
    pub action: Option<String>,
    pub event_ids: Vec<EventId>,
}

impl From<&TraceRecord> for TraceRecordOwned {
    fn from(t: &TraceRecord) -> Self {
        Self {
            node_id: t.node_id.clone(),
            depth: t.depth,
            action: t.action.map(|a| a.code().to_string()),
            event_ids: t.event_ids.clone(),
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum AuditLine<'a> {
    Query { query: &'a str, config: &'a Option<GenerationConfig> },
    Node(&'a TraceRecordOwned),
    Leaf(&'a NodeOutcome),
    Final(&'a FinalAnswer),
}

impl AuditLog {
    pub fn to_ndjson(&self) -> String {
        let mut lines = vec![AuditLine::Query { query: &self.query, config: &self.config }];
        lines.extend(self.search_trace.iter().map(AuditLine::Node));
        lines.extend(self.leaves.iter().map(AuditLine::Leaf));
        lines.extend(self.final_answer.iter().map(AuditLine::Final));
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("audit lines serialize"));
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the serialized log.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_ndjson().as_bytes()))
    }

    /// Writes the log as `<digest prefix>.ndjson` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(String, PathBuf), GenerationError> {
        let err = |e: std::io::Error| GenerationError::Audit { path: dir.display().to_string(), message: e.to_string() };
        std::fs::create_dir_all(dir).map_err(err)?;
        let id = self.digest()[..16].to_string();
        let path = dir.join(format!("{id}.ndjson"));
        std::fs::write(&path, self.to_ndjson()).map_err(err)?;
        Ok((id, path))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryAnswer {
    pub final_answer: FinalAnswer,
    pub audit: AuditLog,
}

/// Answers every leaf, then refines with frame checking.
pub fn answer_query(
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    graph: &EventGraph,
    search: &SearchResult,
    config: &GenerationConfig,
) -> Result<QueryAnswer, GenerationError> {
    config.validate()?;
    let mut audit = AuditLog {
        query: search.query.clone(),
        config: Some(*config),
        search_trace: search.trace.iter().map(TraceRecordOwned::from).collect(),
        ..AuditLog::default()
    };
    if search.sa_leaves.is_empty() {
        return Err(GenerationError::NoLeaves);
    }
    let results: Vec<Result<NodeOutcome, GenerationError>> = search
        .sa_leaves
        .par_iter()
        .map(|leaf| answer_leaf(gateway, prompts, leaf, &search.query, config))
        .collect();
    let mut failure = None;
    for r in results {
        match r {
            Ok(o) => audit.leaves.push(o),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    if let Some(e) = failure {
        return Err(match e {
            GenerationError::Gateway { source, .. } => GenerationError::Gateway { source, partial_audit: Box::new(audit) },
            other => other,
        });
    }
    let final_answer = check_frames_answer(gateway, prompts, graph, &audit.leaves, &search.query, config)?;
    audit.final_answer = Some(final_answer.clone());
    Ok(QueryAnswer { final_answer, audit })
}
