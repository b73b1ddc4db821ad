//! Exhaustive tree search over graph-walking actions.
//!
//! The root holds the initial retrieval for the query. Every node below the
//! depth limit spawns three children (walk forward, walk backward, re-query
//! with model-proposed keywords) and one answer leaf; nodes at the limit only
//! answer. The event list of every node is capped, keeping its best-scored
//! events.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekg::{EventGraph, EventId, GraphError};
use crate::gateway::{dot, ChatMessage, GatewayError, ModelGateway, Role, Sampling};
use crate::index_store::VectorIndex;
use crate::prompts::{PromptError, PromptSet};
use crate::retrieval::{tri_view_retrieve, RetrievalConfig, RetrievalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "F")]
    Forward,
    #[serde(rename = "B")]
    Backward,
    #[serde(rename = "RQ")]
    Requery,
    #[serde(rename = "SA")]
    SummaryAnswer,
}

impl Action {
    pub const EXPANSIONS: [Action; 3] = [Action::Forward, Action::Backward, Action::Requery];

    pub fn code(self) -> &'static str {
        match self {
            Action::Forward => "F",
            Action::Backward => "B",
            Action::Requery => "RQ",
            Action::SummaryAnswer => "SA",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("the graph holds no events")]
    EmptyGraph,
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Retrieval(RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl From<RetrievalError> for SearchError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::EmptyGraph => SearchError::EmptyGraph,
            RetrievalError::Gateway(g) => SearchError::Gateway(g),
            other => SearchError::Retrieval(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub max_depth: usize,
    pub cap: usize,
    pub hops_per_step: usize,
    pub requery_keywords_max: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { max_depth: 3, cap: 16, hops_per_step: 1, requery_keywords_max: 5 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.max_depth == 0 || self.cap == 0 || self.hops_per_step == 0 || self.requery_keywords_max == 0 {
            return Err(SearchError::Config(
                "max_depth, cap, hops_per_step and requery_keywords_max must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Number of answer leaves a full tree of the given depth produces.
pub fn leaf_count(max_depth: usize) -> usize {
    (0..max_depth).map(|i| 3usize.pow(i as u32)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredEvent {
    pub event_id: EventId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchNode {
    pub node_id: String,
    pub depth: usize,
    /// Best first, never longer than the cap.
    pub events: Vec<ScoredEvent>,
    pub action_history: Vec<Action>,
    pub parent_id: Option<String>,
}

impl SearchNode {
    pub fn event_ids(&self) -> Vec<EventId> {
        self.events.iter().map(|e| e.event_id.clone()).collect()
    }

    fn contains(&self, id: &EventId) -> bool {
        self.events.iter().any(|e| &e.event_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaLeaf {
    pub node_id: String,
    pub depth: usize,
    pub path: Vec<Action>,
    /// In temporal order.
    pub event_ids: Vec<EventId>,
    pub context_text: String,
    /// Set when the node had no events to answer from.
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub node_id: String,
    pub depth: usize,
    pub action: Option<Action>,
    pub event_ids: Vec<EventId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub query: String,
    pub sa_leaves: Vec<SaLeaf>,
    pub trace: Vec<TraceRecord>,
}

pub struct SearchContext<'a> {
    pub gateway: &'a dyn ModelGateway,
    pub graph: &'a EventGraph,
    pub index: &'a VectorIndex,
    pub prompts: &'a PromptSet,
    pub retrieval: RetrievalConfig,
    pub config: SearchConfig,
}

/// Sorts best first (higher score, then earlier start, then id) and keeps `cap`.
pub fn truncate_event_list(graph: &EventGraph, mut list: Vec<ScoredEvent>, cap: usize) -> Vec<ScoredEvent> {
    let start = |id: &EventId| graph.event(id).map_or(f64::INFINITY, |e| e.start_time);
    list.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| start(&a.event_id).total_cmp(&start(&b.event_id)))
            .then_with(|| a.event_id.cmp(&b.event_id))
    });
    list.truncate(cap);
    list
}

/// Score for an event that entered the list without a retrieval score.
pub fn fresh_score(graph: &EventGraph, id: &EventId, query_embedding: &[f32]) -> f64 {
    graph.event(id).map_or(0.0, |e| dot(&e.text_embedding, query_embedding))
}

/// Timestamped summaries in temporal order.
pub fn context_text(graph: &EventGraph, ids: &[EventId]) -> String {
    temporal_order(graph, ids)
        .iter()
        .filter_map(|id| graph.event(id))
        .map(|e| format!("[{} {:.1}s-{:.1}s] {}", e.stream_id, e.start_time, e.end_time, e.summary))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn temporal_order(graph: &EventGraph, ids: &[EventId]) -> Vec<EventId> {
    let mut v: Vec<&crate::ekg::EventRecord> = ids.iter().filter_map(|id| graph.event(id)).collect();
    v.sort_by(|a, b| {
        a.start_time
            .total_cmp(&b.start_time)
            .then_with(|| a.stream_id.cmp(&b.stream_id))
            .then_with(|| a.event_id.cmp(&b.event_id))
    });
    v.into_iter().map(|e| e.event_id.clone()).collect()
}

fn parse_keywords(text: &str, max: usize) -> Option<Vec<String>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end <= start {
        return None;
    }
    let raw: Vec<String> = serde_json::from_str(&text[start..=end]).ok()?;
    let mut seen = BTreeSet::new();
    Some(
        raw.into_iter()
            .map(|k| k.trim().to_string())
            .filter(|k| !k.is_empty() && seen.insert(k.to_lowercase()))
            .take(max)
            .collect(),
    )
}

pub struct Searcher<'a> {
    ctx: &'a SearchContext<'a>,
    query: String,
    query_embedding: Vec<f32>,
}

impl<'a> Searcher<'a> {
    /// Runs the initial retrieval and returns the searcher with its root node.
    pub fn start(ctx: &'a SearchContext<'a>, query: &str) -> Result<(Self, SearchNode), SearchError> {
        ctx.config.validate()?;
        if ctx.graph.is_empty() {
            return Err(SearchError::EmptyGraph);
        }
        let ranked = tri_view_retrieve(ctx.gateway, ctx.graph, ctx.index, query, &ctx.retrieval)?;
        let events = ranked
            .entries
            .iter()
            .map(|e| ScoredEvent { event_id: e.event_id.clone(), score: e.borda_score })
            .collect();
        let root = SearchNode {
            node_id: "r".into(),
            depth: 1,
            events: truncate_event_list(ctx.graph, events, ctx.config.cap),
            action_history: vec![],
            parent_id: None,
        };
        Ok((Self { ctx, query: query.to_string(), query_embedding: ranked.query_embedding }, root))
    }

    pub fn query_embedding(&self) -> &[f32] {
        &self.query_embedding
    }

    fn child(&self, node: &SearchNode, action: Action, events: Vec<ScoredEvent>) -> SearchNode {
        let mut action_history = node.action_history.clone();
        action_history.push(action);
        SearchNode {
            node_id: format!("{}.{}", node.node_id, action.code()),
            depth: node.depth + 1,
            events: truncate_event_list(self.ctx.graph, events, self.ctx.config.cap),
            action_history,
            parent_id: Some(node.node_id.clone()),
        }
    }

    fn walk(&self, node: &SearchNode, action: Action) -> Result<SearchNode, SearchError> {
        let graph = self.ctx.graph;
        let hops = self.ctx.config.hops_per_step;
        let mut events = node.events.clone();
        for e in &node.events {
            let next = match action {
                Action::Forward => graph.successors(&e.event_id, hops)?,
                _ => graph.predecessors(&e.event_id, hops)?,
            };
            for n in next {
                if !events.iter().any(|x| x.event_id == n.event_id) {
                    events.push(ScoredEvent {
                        event_id: n.event_id.clone(),
                        score: fresh_score(graph, &n.event_id, &self.query_embedding),
                    });
                }
            }
        }
        Ok(self.child(node, action, events))
    }

    pub fn act_forward(&self, node: &SearchNode) -> Result<SearchNode, SearchError> {
        self.walk(node, Action::Forward)
    }

    pub fn act_backward(&self, node: &SearchNode) -> Result<SearchNode, SearchError> {
        self.walk(node, Action::Backward)
    }

    fn keywords(&self, node: &SearchNode) -> Result<Vec<String>, SearchError> {
        let max = self.ctx.config.requery_keywords_max;
        let prompt = self.ctx.prompts.render(
            "requery",
            &[
                ("query", &self.query),
                ("context", &context_text(self.ctx.graph, &node.event_ids())),
                ("max_keywords", &max.to_string()),
            ],
        )?;
        let mut messages = vec![ChatMessage::user(prompt)];
        let first = self.ctx.gateway.chat(Role::SaReasoner, messages.clone(), Sampling::default())?;
        if let Some(k) = parse_keywords(&first, max) {
            return Ok(k);
        }
        messages.push(ChatMessage::assistant(first));
        messages.push(ChatMessage::user("Reply with only a JSON array of keyword strings."));
        let second = self.ctx.gateway.chat(Role::SaReasoner, messages, Sampling::default())?;
        Ok(parse_keywords(&second, max).unwrap_or_else(|| {
            log::warn!("node {}: keyword reply unparseable twice; re-query adds nothing", node.node_id);
            Vec::new()
        }))
    }

    pub fn act_requery(&self, node: &SearchNode) -> Result<SearchNode, SearchError> {
        let keywords = self.keywords(node)?;
        let mut events = node.events.clone();
        if !keywords.is_empty() {
            let ranked = tri_view_retrieve(
                self.ctx.gateway,
                self.ctx.graph,
                self.ctx.index,
                &keywords.join(" "),
                &self.ctx.retrieval,
            )?;
            for e in ranked.entries {
                if !node.contains(&e.event_id) {
                    events.push(ScoredEvent { event_id: e.event_id, score: e.borda_score });
                }
            }
        }
        Ok(self.child(node, Action::Requery, events))
    }

    pub fn summary_leaf(&self, node: &SearchNode) -> SaLeaf {
        let ids = temporal_order(self.ctx.graph, &node.event_ids());
        let mut path = node.action_history.clone();
        path.push(Action::SummaryAnswer);
        SaLeaf {
            node_id: format!("{}.SA", node.node_id),
            depth: node.depth,
            path,
            context_text: context_text(self.ctx.graph, &ids),
            low_confidence: ids.is_empty(),
            event_ids: ids,
        }
    }

    /// Children for F, B and RQ (below the depth limit) plus this node's answer leaf.
    pub fn expand(&self, node: &SearchNode) -> Result<(Vec<SearchNode>, SaLeaf), SearchError> {
        let leaf = self.summary_leaf(node);
        if node.depth >= self.ctx.config.max_depth {
            return Ok((Vec::new(), leaf));
        }
        let children = Action::EXPANSIONS
            .par_iter()
            .map(|a| match a {
                Action::Forward => self.act_forward(node),
                Action::Backward => self.act_backward(node),
                _ => self.act_requery(node),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((children, leaf))
    }
}

fn trace_of(node: &SearchNode) -> TraceRecord {
    TraceRecord {
        node_id: node.node_id.clone(),
        depth: node.depth,
        action: node.action_history.last().copied(),
        event_ids: node.event_ids(),
    }
}

/// Expands level by level down to the depth limit and collects every leaf.
pub fn search(ctx: &SearchContext<'_>, query: &str) -> Result<SearchResult, SearchError> {
    let (searcher, root) = Searcher::start(ctx, query)?;
    let mut frontier = vec![root];
    let mut sa_leaves = Vec::new();
    let mut trace = Vec::new();
    while !frontier.is_empty() {
        let expanded = frontier
            .par_iter()
            .map(|n| searcher.expand(n))
            .collect::<Result<Vec<_>, _>>()?;
        let mut next = Vec::new();
        for (node, (children, leaf)) in frontier.iter().zip(expanded) {
            trace.push(trace_of(node));
            sa_leaves.push(leaf);
            next.extend(children);
        }
        frontier = next;
    }
    Ok(SearchResult { query: query.to_string(), sa_leaves, trace })
}
