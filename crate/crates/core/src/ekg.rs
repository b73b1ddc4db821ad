//! Event knowledge graph: temporally ordered events, entity mentions linked
//! into clusters, and the three relation families connecting them.
//!
//! Events of a stream form a chain of `before`/`after` relations between
//! consecutive events only. Longer-range temporal order is read off the
//! per-stream ordering, never stored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the L2 norm of stored text embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

pub const LABEL_BEFORE: &str = "before";
pub const LABEL_AFTER: &str = "after";

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Identifier of an event node.
    EventId
);
id_type!(StreamId);
id_type!(MentionId);
id_type!(
    /// Identifier of a canonical entity (a cluster of mentions).
    ClusterId
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub stream_id: StreamId,
    pub timestamp: f64,
    pub vision_embedding: Vec<f32>,
    /// Opaque path or URI used to fetch the raw frame.
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: EventId,
    pub stream_id: StreamId,
    pub start_time: f64,
    pub end_time: f64,
    pub description: String,
    pub summary: String,
    pub text_embedding: Vec<f32>,
    pub frame_refs: Vec<FrameRef>,
}

impl EventRecord {
    fn overlaps(&self, other: &EventRecord) -> bool {
        self.start_time < other.end_time && other.start_time < self.end_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub mention_id: MentionId,
    pub event_id: EventId,
    pub name: String,
    pub description: String,
    pub embedding: Vec<f32>,
    /// Participation role within the owning event, when the extractor gave one.
    #[serde(default)]
    pub role: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityCluster {
    pub cluster_id: ClusterId,
    pub member_ids: BTreeSet<MentionId>,
    pub centroid: Vec<f64>,
    pub canonical_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    EventEvent,
    EntityEntity,
    EntityEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub source_id: String,
    pub target_id: String,
    pub label: String,
}

impl Relation {
    pub fn new(
        kind: RelationKind,
        source: impl Into<String>,
        target: impl Into<String>,
        label: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            source_id: source.into(),
            target_id: target.into(),
            label: label.into(),
        }
    }
}

/// A raw relation between two mentions, as extracted before linking.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MentionRelation {
    pub source: MentionId,
    pub target: MentionId,
    pub label: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("event {new} [{new_start}, {new_end}) overlaps existing event {existing}")]
    Overlap {
        new: EventId,
        new_start: f64,
        new_end: f64,
        existing: EventId,
    },
    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        expected: usize,
        actual: usize,
        what: String,
    },
    #[error("unknown id: {0}")]
    UnknownId(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("referential integrity violated: {}", .0.join("; "))]
    Integrity(Vec<String>),
}

/// Returned alongside lookups that succeeded but found a structural oddity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntegrityWarning {
    ClusterWithoutEvents(ClusterId),
}

#[derive(Debug, Clone, Default)]
pub struct ClusterEvents<'a> {
    pub events: Vec<&'a EventRecord>,
    pub warning: Option<IntegrityWarning>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventGraph {
    dimension: Option<usize>,
    events: BTreeMap<EventId, EventRecord>,
    /// Per-stream event ids ordered by start time.
    streams: BTreeMap<StreamId, Vec<EventId>>,
    mentions: BTreeMap<MentionId, EntityMention>,
    clusters: BTreeMap<ClusterId, EntityCluster>,
    mention_cluster: BTreeMap<MentionId, ClusterId>,
    mention_relations: BTreeSet<MentionRelation>,
    relations: BTreeSet<Relation>,
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl EventGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dimension(dimension: usize) -> Self {
        Self {
            dimension: Some(dimension),
            ..Self::default()
        }
    }

    /// Shared embedding dimension, fixed by the first vector inserted.
    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn event(&self, id: &EventId) -> Option<&EventRecord> {
        self.events.get(id)
    }

    pub fn events(&self) -> impl Iterator<Item = &EventRecord> {
        self.events.values()
    }

    /// Events of every stream, stream by stream, each in temporal order.
    pub fn events_in_order(&self) -> impl Iterator<Item = &EventRecord> {
        self.streams
            .values()
            .flat_map(|ids| ids.iter().map(|id| &self.events[id]))
    }

    pub fn stream_ids(&self) -> impl Iterator<Item = &StreamId> {
        self.streams.keys()
    }

    pub fn stream_events(&self, stream: &StreamId) -> Vec<&EventRecord> {
        self.streams
            .get(stream)
            .map(|ids| ids.iter().map(|id| &self.events[id]).collect())
            .unwrap_or_default()
    }

    pub fn mentions(&self) -> impl Iterator<Item = &EntityMention> {
        self.mentions.values()
    }

    pub fn mention(&self, id: &MentionId) -> Option<&EntityMention> {
        self.mentions.get(id)
    }

    pub fn mention_count(&self) -> usize {
        self.mentions.len()
    }

    pub fn mention_relations(&self) -> impl Iterator<Item = &MentionRelation> {
        self.mention_relations.iter()
    }

    pub fn clusters(&self) -> impl Iterator<Item = &EntityCluster> {
        self.clusters.values()
    }

    pub fn cluster(&self, id: &ClusterId) -> Option<&EntityCluster> {
        self.clusters.get(id)
    }

    pub fn cluster_of(&self, mention: &MentionId) -> Option<&ClusterId> {
        self.mention_cluster.get(mention)
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.iter()
    }

    pub fn relations_of_kind(&self, kind: RelationKind) -> impl Iterator<Item = &Relation> {
        self.relations.iter().filter(move |r| r.kind == kind)
    }

    fn check_dimension(&mut self, len: usize, what: impl FnOnce() -> String) -> Result<(), GraphError> {
        match self.dimension {
            Some(d) if d != len => Err(GraphError::Dimension {
                expected: d,
                actual: len,
                what: what(),
            }),
            _ => Ok(()),
        }
    }

    fn validate_event(&self, event: &EventRecord) -> Result<(), GraphError> {
        if !(event.start_time < event.end_time) {
            return Err(GraphError::Invalid(format!(
                "event {} has start_time {} >= end_time {}",
                event.event_id, event.start_time, event.end_time
            )));
        }
        if self.events.contains_key(&event.event_id) {
            return Err(GraphError::DuplicateId(event.event_id.to_string()));
        }
        let dim = self.dimension.unwrap_or(event.text_embedding.len());
        if event.text_embedding.len() != dim {
            return Err(GraphError::Dimension {
                expected: dim,
                actual: event.text_embedding.len(),
                what: format!("text embedding of {}", event.event_id),
            });
        }
        let norm = l2_norm(&event.text_embedding);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(GraphError::Invalid(format!(
                "text embedding of {} has norm {norm}",
                event.event_id
            )));
        }
        for frame in &event.frame_refs {
            if frame.vision_embedding.len() != dim {
                return Err(GraphError::Dimension {
                    expected: dim,
                    actual: frame.vision_embedding.len(),
                    what: format!("frame {} of {}", frame.locator, event.event_id),
                });
            }
            if frame.timestamp < event.start_time || frame.timestamp > event.end_time {
                return Err(GraphError::Invalid(format!(
                    "frame {} at {} lies outside event {}",
                    frame.locator, frame.timestamp, event.event_id
                )));
            }
            if frame.stream_id != event.stream_id {
                return Err(GraphError::Invalid(format!(
                    "frame {} belongs to stream {}, event {} to {}",
                    frame.locator, frame.stream_id, event.event_id, event.stream_id
                )));
            }
        }
        Ok(())
    }

    /// Inserts an event in temporal order within its stream and relinks the
    /// before/after chain around it.
    pub fn add_event(&mut self, event: EventRecord) -> Result<(), GraphError> {
        self.validate_event(&event)?;
        let chain = self.streams.get(&event.stream_id);
        let pos = chain
            .map(|ids| ids.partition_point(|id| self.events[id].start_time < event.start_time))
            .unwrap_or(0);
        if let Some(ids) = chain {
            for neighbour in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
                if let Some(id) = ids.get(neighbour) {
                    let existing = &self.events[id];
                    if existing.overlaps(&event) {
                        return Err(GraphError::Overlap {
                            new: event.event_id.clone(),
                            new_start: event.start_time,
                            new_end: event.end_time,
                            existing: id.clone(),
                        });
                    }
                }
            }
        }

        self.dimension.get_or_insert(event.text_embedding.len());
        let id = event.event_id.clone();
        let ids = self.streams.entry(event.stream_id.clone()).or_default();
        let prev = pos.checked_sub(1).map(|p| ids[p].clone());
        let next = ids.get(pos).cloned();
        ids.insert(pos, id.clone());
        self.events.insert(id.clone(), event);

        if let (Some(p), Some(n)) = (&prev, &next) {
            self.unlink_pair(p, n);
        }
        if let Some(p) = &prev {
            self.link_pair(p, &id);
        }
        if let Some(n) = &next {
            self.link_pair(&id, n);
        }
        Ok(())
    }

    /// Removes an event together with its mentions and every relation that
    /// touches it. Clusters left empty are dropped; others get their centroid
    /// recomputed.
    pub fn remove_event(&mut self, id: &EventId) -> Result<EventRecord, GraphError> {
        let event = self
            .events
            .remove(id)
            .ok_or_else(|| GraphError::UnknownId(id.to_string()))?;
        let ids = self.streams.get_mut(&event.stream_id).expect("stream index");
        let pos = ids.iter().position(|e| e == id).expect("event in stream index");
        ids.remove(pos);
        let prev = pos.checked_sub(1).map(|p| ids[p].clone());
        let next = ids.get(pos).cloned();
        if ids.is_empty() {
            self.streams.remove(&event.stream_id);
        }
        self.relations
            .retain(|r| r.source_id != id.as_str() && r.target_id != id.as_str());
        if let (Some(p), Some(n)) = (&prev, &next) {
            self.link_pair(p, n);
        }

        let owned: Vec<MentionId> = self
            .mentions
            .values()
            .filter(|m| &m.event_id == id)
            .map(|m| m.mention_id.clone())
            .collect();
        for mid in &owned {
            self.mentions.remove(mid);
            if let Some(cid) = self.mention_cluster.remove(mid) {
                let cluster = self.clusters.get_mut(&cid).expect("cluster index");
                cluster.member_ids.remove(mid);
            }
        }
        self.mention_relations
            .retain(|r| !owned.contains(&r.source) && !owned.contains(&r.target));
        let emptied: Vec<ClusterId> = self
            .clusters
            .values()
            .filter(|c| c.member_ids.is_empty())
            .map(|c| c.cluster_id.clone())
            .collect();
        for cid in emptied {
            self.clusters.remove(&cid);
            self.relations
                .retain(|r| r.source_id != cid.as_str() && r.target_id != cid.as_str());
        }
        let touched: Vec<ClusterId> = self.clusters.keys().cloned().collect();
        for cid in touched {
            let centroid = self.member_mean(&self.clusters[&cid].member_ids);
            self.clusters.get_mut(&cid).expect("cluster").centroid = centroid;
        }
        Ok(event)
    }

    fn link_pair(&mut self, earlier: &EventId, later: &EventId) {
        self.relations.insert(Relation::new(
            RelationKind::EventEvent,
            earlier.as_str(),
            later.as_str(),
            LABEL_BEFORE,
        ));
        self.relations.insert(Relation::new(
            RelationKind::EventEvent,
            later.as_str(),
            earlier.as_str(),
            LABEL_AFTER,
        ));
    }

    fn unlink_pair(&mut self, earlier: &EventId, later: &EventId) {
        self.relations.remove(&Relation::new(
            RelationKind::EventEvent,
            earlier.as_str(),
            later.as_str(),
            LABEL_BEFORE,
        ));
        self.relations.remove(&Relation::new(
            RelationKind::EventEvent,
            later.as_str(),
            earlier.as_str(),
            LABEL_AFTER,
        ));
    }

    fn chain_position(&self, id: &EventId) -> Result<(&Vec<EventId>, usize), GraphError> {
        let event = self
            .events
            .get(id)
            .ok_or_else(|| GraphError::UnknownId(id.to_string()))?;
        let ids = &self.streams[&event.stream_id];
        let pos = ids
            .binary_search_by(|probe| {
                self.events[probe]
                    .start_time
                    .total_cmp(&event.start_time)
            })
            .expect("event in stream index");
        Ok((ids, pos))
    }

    /// Up to `hops` events following `id` in stream order.
    pub fn successors(&self, id: &EventId, hops: usize) -> Result<Vec<&EventRecord>, GraphError> {
        let (ids, pos) = self.chain_position(id)?;
        Ok(ids[pos + 1..]
            .iter()
            .take(hops)
            .map(|e| &self.events[e])
            .collect())
    }

    /// Up to `hops` events preceding `id`, returned in temporal order.
    pub fn predecessors(&self, id: &EventId, hops: usize) -> Result<Vec<&EventRecord>, GraphError> {
        let (ids, pos) = self.chain_position(id)?;
        let from = pos.saturating_sub(hops);
        Ok(ids[from..pos].iter().map(|e| &self.events[e]).collect())
    }

    /// Events the cluster participates in, via entity-event relations.
    pub fn events_of_cluster(&self, id: &ClusterId) -> Result<ClusterEvents<'_>, GraphError> {
        if !self.clusters.contains_key(id) {
            return Err(GraphError::UnknownId(id.to_string()));
        }
        let mut seen = BTreeSet::new();
        let events: Vec<&EventRecord> = self
            .relations_from(RelationKind::EntityEvent, id.as_str())
            .filter_map(|r| self.events.get(&EventId::new(r.target_id.clone())))
            .filter(|e| seen.insert(e.event_id.clone()))
            .collect();
        let warning = if events.is_empty() {
            log::warn!("cluster {id} has no entity-event relation");
            Some(IntegrityWarning::ClusterWithoutEvents(id.clone()))
        } else {
            None
        };
        Ok(ClusterEvents { events, warning })
    }

    fn relations_from<'a>(
        &'a self,
        kind: RelationKind,
        source: &'a str,
    ) -> impl Iterator<Item = &'a Relation> + 'a {
        let lower = Relation::new(kind, source, "", "");
        self.relations
            .range(lower..)
            .take_while(move |r| r.kind == kind && r.source_id == source)
    }

    pub fn add_mention(&mut self, mention: EntityMention) -> Result<(), GraphError> {
        if mention.name.trim().is_empty() {
            return Err(GraphError::Invalid(format!(
                "mention {} has an empty name",
                mention.mention_id
            )));
        }
        if !self.events.contains_key(&mention.event_id) {
            return Err(GraphError::UnknownId(mention.event_id.to_string()));
        }
        if self.mentions.contains_key(&mention.mention_id) {
            return Err(GraphError::DuplicateId(mention.mention_id.to_string()));
        }
        let id = mention.mention_id.to_string();
        self.check_dimension(mention.embedding.len(), || format!("mention {id}"))?;
        self.dimension.get_or_insert(mention.embedding.len());
        self.mentions.insert(mention.mention_id.clone(), mention);
        Ok(())
    }

    pub fn add_mention_relation(&mut self, relation: MentionRelation) -> Result<(), GraphError> {
        for end in [&relation.source, &relation.target] {
            if !self.mentions.contains_key(end) {
                return Err(GraphError::UnknownId(end.to_string()));
            }
        }
        self.mention_relations.insert(relation);
        Ok(())
    }

    /// Arithmetic mean of the member embeddings, accumulated in f64.
    pub fn member_mean(&self, members: &BTreeSet<MentionId>) -> Vec<f64> {
        let dim = self.dimension.unwrap_or(0);
        let mut acc = vec![0.0f64; dim];
        for mid in members {
            for (a, &x) in acc.iter_mut().zip(&self.mentions[mid].embedding) {
                *a += x as f64;
            }
        }
        let n = members.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Replaces the whole cluster set plus all entity-entity and entity-event
    /// relations. `clusters` must partition the current mention set.
    pub fn replace_entity_layer(
        &mut self,
        clusters: Vec<EntityCluster>,
        relations: BTreeSet<Relation>,
    ) -> Result<(), GraphError> {
        let mut mention_cluster = BTreeMap::new();
        let mut problems = Vec::new();
        for cluster in &clusters {
            if cluster.member_ids.is_empty() {
                problems.push(format!("cluster {} is empty", cluster.cluster_id));
            }
            for mid in &cluster.member_ids {
                if !self.mentions.contains_key(mid) {
                    problems.push(format!("cluster {} lists unknown mention {mid}", cluster.cluster_id));
                }
                if let Some(prev) = mention_cluster.insert(mid.clone(), cluster.cluster_id.clone()) {
                    problems.push(format!(
                        "mention {mid} is in both {prev} and {}",
                        cluster.cluster_id
                    ));
                }
            }
        }
        for mid in self.mentions.keys() {
            if !mention_cluster.contains_key(mid) {
                problems.push(format!("mention {mid} has no cluster"));
            }
        }
        let cluster_ids: BTreeSet<&str> = clusters.iter().map(|c| c.cluster_id.as_str()).collect();
        for r in &relations {
            match r.kind {
                RelationKind::EventEvent => {
                    problems.push(format!("event-event relation {r:?} in entity layer"));
                }
                RelationKind::EntityEntity => {
                    for end in [&r.source_id, &r.target_id] {
                        if !cluster_ids.contains(end.as_str()) {
                            problems.push(format!("relation endpoint {end} is not a cluster"));
                        }
                    }
                }
                RelationKind::EntityEvent => {
                    if !cluster_ids.contains(r.source_id.as_str()) {
                        problems.push(format!("relation source {} is not a cluster", r.source_id));
                    }
                    if !self.events.contains_key(&EventId::new(r.target_id.clone())) {
                        problems.push(format!("relation target {} is not an event", r.target_id));
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(GraphError::Integrity(problems));
        }
        self.relations.retain(|r| r.kind == RelationKind::EventEvent);
        self.relations.extend(relations);
        self.clusters = clusters
            .into_iter()
            .map(|c| (c.cluster_id.clone(), c))
            .collect();
        self.mention_cluster = mention_cluster;
        Ok(())
    }

    /// Full structural check; returns every offender found.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut problems = Vec::new();
        for (sid, ids) in &self.streams {
            for pair in ids.windows(2) {
                let (a, b) = (&self.events[&pair[0]], &self.events[&pair[1]]);
                if a.end_time > b.start_time {
                    problems.push(format!("events {} and {} overlap", a.event_id, b.event_id));
                }
                let before = Relation::new(RelationKind::EventEvent, a.event_id.as_str(), b.event_id.as_str(), LABEL_BEFORE);
                let after = Relation::new(RelationKind::EventEvent, b.event_id.as_str(), a.event_id.as_str(), LABEL_AFTER);
                if !self.relations.contains(&before) || !self.relations.contains(&after) {
                    problems.push(format!("stream {sid}: chain link {} -> {} missing", a.event_id, b.event_id));
                }
            }
        }
        let ee = self.relations_of_kind(RelationKind::EventEvent).count();
        let expected: usize = self.streams.values().map(|ids| 2 * ids.len().saturating_sub(1)).sum();
        if ee != expected {
            problems.push(format!("{ee} event-event relations, expected {expected}"));
        }
        for m in self.mentions.values() {
            if !self.events.contains_key(&m.event_id) {
                problems.push(format!("mention {} references unknown event {}", m.mention_id, m.event_id));
            }
        }
        for r in &self.mention_relations {
            for end in [&r.source, &r.target] {
                if !self.mentions.contains_key(end) {
                    problems.push(format!("mention relation references unknown mention {end}"));
                }
            }
        }
        for c in self.clusters.values() {
            for mid in &c.member_ids {
                if !self.mentions.contains_key(mid) {
                    problems.push(format!("cluster {} lists unknown mention {mid}", c.cluster_id));
                }
            }
        }
        for r in &self.relations {
            let ok = match r.kind {
                RelationKind::EventEvent => {
                    self.events.contains_key(&EventId::new(r.source_id.clone()))
                        && self.events.contains_key(&EventId::new(r.target_id.clone()))
                }
                RelationKind::EntityEntity => {
                    self.clusters.contains_key(&ClusterId::new(r.source_id.clone()))
                        && self.clusters.contains_key(&ClusterId::new(r.target_id.clone()))
                }
                RelationKind::EntityEvent => {
                    self.clusters.contains_key(&ClusterId::new(r.source_id.clone()))
                        && self.events.contains_key(&EventId::new(r.target_id.clone()))
                }
            };
            if !ok {
                problems.push(format!(
                    "dangling {:?} relation {} -> {} ({})",
                    r.kind, r.source_id, r.target_id, r.label
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GraphError::Integrity(problems))
        }
    }
}

/// Shared handle: one writer, many readers. Readers take cheap snapshots that
/// never observe a half-applied update.
#[derive(Debug, Clone, Default)]
pub struct GraphHandle {
    inner: Arc<RwLock<Arc<EventGraph>>>,
}

impl GraphHandle {
    pub fn new(graph: EventGraph) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Arc::new(graph))),
        }
    }

    pub fn snapshot(&self) -> Arc<EventGraph> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Applies `f` to a private copy and publishes it only if `f` succeeds.
    pub fn update<T, E>(&self, f: impl FnOnce(&mut EventGraph) -> Result<T, E>) -> Result<T, E> {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let mut next = (**guard).clone();
        let out = f(&mut next)?;
        *guard = Arc::new(next);
        Ok(out)
    }

    pub fn replace(&self, graph: EventGraph) {
        *self.inner.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(graph);
    }
}
