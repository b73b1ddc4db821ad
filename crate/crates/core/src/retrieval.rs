//! Tri-view retrieval and Borda fusion.
//!
//! A query is matched against event descriptions, entity centroids and frame
//! vision vectors. Entity and frame hits are mapped onto the events they belong
//! to, keeping the strongest similarity per event. Each view's similarities are
//! then turned into shares of that view's total and summed per event.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekg::{ClusterId, EventGraph, EventId, GraphError};
use crate::gateway::{GatewayError, ModelGateway, Role};
use crate::index_store::{Collection, StoreError, VectorIndex};

pub const DEFAULT_TOP_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Event,
    Entity,
    Vision,
}

impl View {
    pub const ALL: [View; 3] = [View::Event, View::Entity, View::Vision];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Event => "event",
            View::Entity => "entity",
            View::Vision => "vision",
        }
    }

    fn collection(self) -> Collection {
        match self {
            View::Event => Collection::EventText,
            View::Entity => Collection::EntityCentroid,
            View::Vision => Collection::FrameVision,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("the graph holds no events")]
    EmptyGraph,
    #[error("K must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewHit {
    pub view: View,
    pub event_id: EventId,
    pub raw_similarity: f64,
    pub borda_component: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    pub event_id: EventId,
    pub borda_score: f64,
    pub per_view: BTreeMap<View, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEventList {
    pub entries: Vec<RankedEntry>,
    pub query_text: String,
    pub query_embedding: Vec<f32>,
}

impl RankedEventList {
    pub fn event_ids(&self) -> Vec<EventId> {
        self.entries.iter().map(|e| e.event_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-view multipliers applied to the normalized shares. All ones by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewWeights {
    pub event: f64,
    pub entity: f64,
    pub vision: f64,
}

impl Default for ViewWeights {
    fn default() -> Self {
        Self { event: 1.0, entity: 1.0, vision: 1.0 }
    }
}

impl ViewWeights {
    pub fn get(&self, view: View) -> f64 {
        match view {
            View::Event => self.event,
            View::Entity => self.entity,
            View::Vision => self.vision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub weights: ViewWeights,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K, weights: ViewWeights::default() }
    }
}

pub type ViewResult = Vec<(EventId, f64)>;

fn keep_max(best: &mut BTreeMap<EventId, f64>, id: &EventId, sim: f64) {
    best.entry(id.clone()).and_modify(|s| *s = s.max(sim)).or_insert(sim);
}

fn sorted_hits(best: BTreeMap<EventId, f64>) -> ViewResult {
    let mut v: ViewResult = best.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Top-K in one view, expressed as events with their best similarity.
pub fn retrieve_view(
    graph: &EventGraph,
    index: &VectorIndex,
    view: View,
    query: &[f32],
    k: usize,
) -> Result<ViewResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let hits = index.top_k(view.collection(), query, k)?;
    let mut best = BTreeMap::new();
    for hit in hits {
        match view {
            View::Event | View::Vision => keep_max(&mut best, &EventId::new(hit.owner), hit.similarity),
            View::Entity => {
                let linked = graph.events_of_cluster(&ClusterId::new(hit.owner))?;
                if let Some(w) = linked.warning {
                    log::warn!("{w:?}");
                }
                for e in linked.events {
                    keep_max(&mut best, &e.event_id, hit.similarity);
                }
            }
        }
    }
    Ok(sorted_hits(best))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BordaOutcome {
    pub scores: BTreeMap<EventId, f64>,
    pub hits: Vec<ViewHit>,
    /// Views whose similarity total was not positive and were left out.
    pub degenerate: Vec<View>,
}

/// Normalizes each view's similarities to shares of the view total and sums
/// them per event. Negative similarities count as zero.
pub fn borda_scores(per_view: &[(View, ViewResult)]) -> BordaOutcome {
    weighted_borda_scores(per_view, &ViewWeights::default())
}

pub fn weighted_borda_scores(per_view: &[(View, ViewResult)], weights: &ViewWeights) -> BordaOutcome {
    let mut out = BordaOutcome::default();
    for (view, hits) in per_view {
        if hits.is_empty() {
            continue;
        }
        let clamped: Vec<f64> = hits
            .iter()
            .map(|(id, s)| {
                if *s < 0.0 {
                    log::debug!("{view} view: clamping similarity {s} of {id} to 0");
                }
                s.max(0.0)
            })
            .collect();
        let total: f64 = clamped.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            log::warn!("{view} view is degenerate (similarity sum {total}); skipping it");
            out.degenerate.push(*view);
            continue;
        }
        let w = weights.get(*view);
        for ((id, raw), sim) in hits.iter().zip(clamped) {
            let share = sim / total;
            *out.scores.entry(id.clone()).or_insert(0.0) += w * share;
            out.hits.push(ViewHit { view: *view, event_id: id.clone(), raw_similarity: *raw, borda_component: share });
        }
    }
    out
}

/// Orders events by score, then earlier start, then id.
pub fn rank(graph: &EventGraph, scores: &BTreeMap<EventId, f64>) -> Vec<(EventId, f64)> {
    let start = |id: &EventId| graph.event(id).map_or(f64::INFINITY, |e| e.start_time);
    let mut v: Vec<(EventId, f64)> = scores.iter().map(|(k, s)| (k.clone(), *s)).collect();
    v.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| start(&a.0).total_cmp(&start(&b.0)))
            .then_with(|| a.0.cmp(&b.0))
    });
    v
}

/// Retrieval for an already embedded query.
pub fn retrieve_embedded(
    graph: &EventGraph,
    index: &VectorIndex,
    query_text: &str,
    query_embedding: Vec<f32>,
    config: &RetrievalConfig,
) -> Result<RankedEventList, RetrievalError> {
    if graph.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    let k = config.top_k;
    let q = &query_embedding;
    let (event, (entity, vision)) = rayon::join(
        || retrieve_view(graph, index, View::Event, q, k),
        || {
            rayon::join(
                || retrieve_view(graph, index, View::Entity, q, k),
                || retrieve_view(graph, index, View::Vision, q, k),
            )
        },
    );
    let per_view = vec![(View::Event, event?), (View::Entity, entity?), (View::Vision, vision?)];
    let outcome = weighted_borda_scores(&per_view, &config.weights);
    let mut raw: BTreeMap<&EventId, BTreeMap<View, f64>> = BTreeMap::new();
    for (view, hits) in &per_view {
        for (id, s) in hits {
            raw.entry(id).or_default().insert(*view, *s);
        }
    }
    let entries = rank(graph, &outcome.scores)
        .into_iter()
        .map(|(event_id, borda_score)| RankedEntry {
            per_view: raw.get(&event_id).cloned().unwrap_or_default(),
            event_id,
            borda_score,
        })
        .collect();
    Ok(RankedEventList { entries, query_text: query_text.to_string(), query_embedding })
}

/// Embeds the query once and runs all three views with the same K.
pub fn tri_view_retrieve(
    gateway: &dyn ModelGateway,
    graph: &EventGraph,
    index: &VectorIndex,
    query_text: &str,
    config: &RetrievalConfig,
) -> Result<RankedEventList, RetrievalError> {
    if graph.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    if config.top_k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let embedding = gateway
        .embed_text(Role::Embedder, &[query_text.to_string()])?
        .pop()
        .ok_or_else(|| GatewayError::Malformed("no query embedding returned".into()))?;
    retrieve_embedded(graph, index, query_text, embedding, config)
}
