//! Entity extraction, embedding and clustering.
//!
//! Each event's description is sent to the extractor role, which replies with
//! JSON naming the entities, their relations and their roles in the event.
//! Mentions are embedded and grouped with K-means; every cluster becomes one
//! canonical entity whose centroid is the mean of its members. Entity-entity
//! and entity-event relations are then rewritten at cluster granularity.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekg::{
    ClusterId, EntityCluster, EntityMention, EventGraph, EventId, EventRecord, GraphError, MentionId, MentionRelation,
    Relation, RelationKind,
};
use crate::gateway::{ChatMessage, GatewayError, ModelGateway, Role, Sampling};
use crate::prompts::{PromptError, PromptSet};

pub const DEFAULT_PARTICIPATION: &str = "participant";

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("event {0} has no description to extract entities from")]
    EmptyDescription(EventId),
    #[error("event {event}: extractor output is not valid JSON of the expected shape: {message}")]
    Parse { event: EventId, message: String },
    #[error("invalid clustering configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedEntity {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedRelation {
    pub source: String,
    pub target: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participation {
    pub name: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractionResult {
    pub event_id: EventId,
    pub mentions: Vec<ExtractedEntity>,
    pub relations: Vec<ExtractedRelation>,
    pub participations: Vec<Participation>,
}

#[derive(Deserialize)]
struct RawExtraction {
    #[serde(default)]
    entities: Vec<ExtractedEntity>,
    #[serde(default)]
    relations: Vec<ExtractedRelation>,
    #[serde(default)]
    participations: Vec<Participation>,
}

/// The outermost `{...}` span, ignoring code fences or chatter around it.
fn json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

fn parse_extraction(event_id: &EventId, text: &str) -> Result<ExtractionResult, String> {
    let body = json_object(text).ok_or_else(|| "no JSON object found".to_string())?;
    let raw: RawExtraction = serde_json::from_str(body).map_err(|e| e.to_string())?;
    let mut seen = BTreeSet::new();
    let mut mentions = Vec::new();
    for e in raw.entities {
        let name = e.name.trim().to_string();
        if name.is_empty() {
            continue;
        }
        if seen.insert(name.clone()) {
            mentions.push(ExtractedEntity { name, description: e.description.trim().to_string() });
        }
    }
    let known = |n: &str| seen.contains(n.trim());
    let relations = raw
        .relations
        .into_iter()
        .filter(|r| {
            let ok = known(&r.source) && known(&r.target) && !r.label.trim().is_empty();
            if !ok {
                log::warn!("event {event_id}: dropping relation {} -> {} with unknown endpoint", r.source, r.target);
            }
            ok
        })
        .map(|r| ExtractedRelation {
            source: r.source.trim().into(),
            target: r.target.trim().into(),
            label: r.label.trim().into(),
        })
        .collect();
    let participations = raw
        .participations
        .into_iter()
        .filter(|p| known(&p.name) && !p.role.trim().is_empty())
        .map(|p| Participation { name: p.name.trim().into(), role: p.role.trim().into() })
        .collect();
    Ok(ExtractionResult { event_id: event_id.clone(), mentions, relations, participations })
}

/// Asks the extractor for the entities of one event. A malformed reply gets
/// one corrective follow-up before giving up.
pub fn extract_entities(
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    event: &EventRecord,
) -> Result<ExtractionResult, LinkError> {
    if event.description.trim().is_empty() {
        return Err(LinkError::EmptyDescription(event.event_id.clone()));
    }
    let prompt = prompts.render(
        "extract",
        &[
            ("event_id", event.event_id.as_str()),
            ("start", &format!("{:.2}", event.start_time)),
            ("end", &format!("{:.2}", event.end_time)),
            ("description", &event.description),
        ],
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let first = gateway.chat(Role::Extractor, messages.clone(), Sampling::default())?;
    match parse_extraction(&event.event_id, &first) {
        Ok(r) => Ok(r),
        Err(message) => {
            log::warn!("event {}: reprompting extractor ({message})", event.event_id);
            messages.push(ChatMessage::assistant(first));
            messages.push(ChatMessage::user(prompts.get("extract_retry")?));
            let second = gateway.chat(Role::Extractor, messages, Sampling::default())?;
            parse_extraction(&event.event_id, &second)
                .map_err(|message| LinkError::Parse { event: event.event_id.clone(), message })
        }
    }
}

pub fn mention_id_for(event: &EventId, index: usize) -> MentionId {
    MentionId::new(format!("{event}/m{index}"))
}

/// The text embedded for a mention.
pub fn mention_text(entity: &ExtractedEntity) -> String {
    if entity.description.is_empty() {
        entity.name.clone()
    } else {
        format!("{}: {}", entity.name, entity.description)
    }
}

/// Embeds every mention of an extraction in one batch.
pub fn embed_mentions(gateway: &dyn ModelGateway, result: &ExtractionResult) -> Result<Vec<EntityMention>, LinkError> {
    if result.mentions.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = result.mentions.iter().map(mention_text).collect();
    let vectors = gateway.embed_text(Role::Embedder, &texts)?;
    let mut roles: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for p in &result.participations {
        roles.entry(p.name.as_str()).or_default().insert(p.role.as_str());
    }
    Ok(result
        .mentions
        .iter()
        .zip(vectors)
        .enumerate()
        .map(|(i, (m, embedding))| EntityMention {
            mention_id: mention_id_for(&result.event_id, i),
            event_id: result.event_id.clone(),
            name: m.name.clone(),
            description: m.description.clone(),
            embedding,
            role: roles
                .get(m.name.as_str())
                .map(|r| r.iter().copied().collect::<Vec<_>>().join(",")),
        })
        .collect())
}

/// Adds the mentions and their raw relations to the graph.
pub fn record_mentions(
    graph: &mut EventGraph,
    result: &ExtractionResult,
    mentions: Vec<EntityMention>,
) -> Result<Vec<MentionId>, LinkError> {
    let by_name: BTreeMap<String, MentionId> =
        mentions.iter().map(|m| (m.name.clone(), m.mention_id.clone())).collect();
    let ids: Vec<MentionId> = mentions.iter().map(|m| m.mention_id.clone()).collect();
    for m in mentions {
        graph.add_mention(m)?;
    }
    for r in &result.relations {
        if let (Some(s), Some(t)) = (by_name.get(&r.source), by_name.get(&r.target)) {
            graph.add_mention_relation(MentionRelation { source: s.clone(), target: t.clone(), label: r.label.clone() })?;
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    Fixed(usize),
    Ratio(f64),
}

impl KPolicy {
    pub fn k_for(self, n: usize) -> usize {
        let k = match self {
            KPolicy::Fixed(k) => k,
            KPolicy::Ratio(r) => (r * n as f64).ceil() as usize,
        };
        k.clamp(1, n.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    pub k_policy: KPolicy,
    pub max_iters: usize,
    pub seed: u64,
    pub tol: f64,
    /// Full re-clustering happens after this many new mentions.
    pub recluster_every: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self { k_policy: KPolicy::Ratio(0.2), max_iters: 50, seed: 0, tol: 1e-6, recluster_every: 200 }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        match self.k_policy {
            KPolicy::Fixed(0) => return Err(LinkError::Config("fixed K must be at least 1".into())),
            KPolicy::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                return Err(LinkError::Config("K ratio must lie in (0, 1]".into()))
            }
            _ => {}
        }
        if self.max_iters == 0 || self.recluster_every == 0 {
            return Err(LinkError::Config("max_iters and recluster_every must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(LinkError::Config("tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutput {
    /// Cluster per point, numbered densely from 0 after empty clusters are dropped.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

fn nearest(p: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_centroids(points: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to_f64 = |p: &[f32]| p.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut centroids = vec![to_f64(points[rng.random_range(0..points.len())])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total is positive");
        }
        let c = to_f64(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(points: &[&[f32]], assignments: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0f64; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, &x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x as f64;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| if n == 0 { prev.clone() } else { s.into_iter().map(|x| x / n as f64).collect() })
        .collect()
}

/// Lloyd iterations from k-means++ seeding. Identical inputs and seed give
/// identical output.
pub fn kmeans(points: &[&[f32]], k: usize, config: &ClusteringConfig) -> KMeansOutput {
    if points.is_empty() {
        return KMeansOutput { assignments: vec![], centroids: vec![], objective: vec![], iterations: 0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = seed_centroids(points, k.clamp(1, points.len()), &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        let updated = means(points, &assignments, &centroids);
        let shift = centroids
            .iter()
            .zip(&updated)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        centroids = updated;
        iterations += 1;
        objective.push(points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum());
        if iterations >= config.max_iters || shift < config.tol {
            break;
        }
        let next: Vec<usize> = points
            .iter()
            .zip(&assignments)
            .map(|(p, &cur)| {
                let (best, d) = nearest(p, &centroids);
                // Keep the current cluster on exact ties so assignments settle.
                if sq_dist(p, &centroids[cur]) <= d { cur } else { best }
            })
            .collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let mut remap = BTreeMap::new();
    for &a in &assignments {
        let n = remap.len();
        remap.entry(a).or_insert(n);
    }
    let mut kept: Vec<(usize, Vec<f64>)> =
        remap.iter().map(|(&old, &new)| (new, centroids[old].clone())).collect();
    kept.sort_by_key(|(new, _)| *new);
    KMeansOutput {
        assignments: assignments.iter().map(|a| remap[a]).collect(),
        centroids: kept.into_iter().map(|(_, c)| c).collect(),
        objective,
        iterations,
    }
}

/// Most frequent member name; ties go to the lexicographically smallest.
pub fn canonical_name<'a>(names: impl IntoIterator<Item = &'a str>) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for n in names {
        *counts.entry(n).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None::<(&str, usize)>, |best, (name, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((name, c)),
        })
        .map(|(n, _)| n.to_string())
        .unwrap_or_default()
}

fn cluster_number(id: &ClusterId) -> Option<u64> {
    id.as_str().strip_prefix('u')?.parse().ok()
}

/// Names new member sets after the prior clusters they overlap most; sets
/// without a match get fresh ids.
pub fn remap_cluster_ids(prior: &[EntityCluster], groups: &[BTreeSet<MentionId>]) -> Vec<ClusterId> {
    let mut candidates = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        for p in prior {
            let overlap = members.intersection(&p.member_ids).count();
            if overlap > 0 {
                candidates.push((overlap, p.cluster_id.clone(), g));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
    let mut assigned: Vec<Option<ClusterId>> = vec![None; groups.len()];
    let mut used = BTreeSet::new();
    for (_, id, g) in candidates {
        if assigned[g].is_none() && !used.contains(&id) {
            used.insert(id.clone());
            assigned[g] = Some(id);
        }
    }
    let mut next = prior.iter().filter_map(|c| cluster_number(&c.cluster_id)).max().map_or(0, |n| n + 1);
    assigned
        .into_iter()
        .map(|a| {
            a.unwrap_or_else(|| {
                let id = ClusterId::new(format!("u{next}"));
                next += 1;
                id
            })
        })
        .collect()
}

fn build_clusters(graph: &EventGraph, groups: Vec<BTreeSet<MentionId>>, ids: Vec<ClusterId>) -> Vec<EntityCluster> {
    groups
        .into_iter()
        .zip(ids)
        .map(|(member_ids, cluster_id)| EntityCluster {
            canonical_name: canonical_name(member_ids.iter().filter_map(|m| graph.mention(m)).map(|m| m.name.as_str())),
            centroid: graph.member_mean(&member_ids),
            member_ids,
            cluster_id,
        })
        .collect()
}

/// Runs K-means over every mention in the graph.
pub fn cluster_mentions(graph: &EventGraph, config: &ClusteringConfig) -> Vec<EntityCluster> {
    let mentions: Vec<&EntityMention> = graph.mentions().collect();
    if mentions.is_empty() {
        return Vec::new();
    }
    let points: Vec<&[f32]> = mentions.iter().map(|m| m.embedding.as_slice()).collect();
    let out = kmeans(&points, config.k_policy.k_for(points.len()), config);
    let mut groups = vec![BTreeSet::new(); out.centroids.len()];
    for (m, &a) in mentions.iter().zip(&out.assignments) {
        groups[a].insert(m.mention_id.clone());
    }
    let prior: Vec<EntityCluster> = graph.clusters().cloned().collect();
    let ids = remap_cluster_ids(&prior, &groups);
    build_clusters(graph, groups, ids)
}

/// Places mentions that have no cluster yet into the nearest existing one,
/// recomputing the affected centroids. With no clusters at all, falls back
/// to a full clustering.
pub fn assign_pending(graph: &EventGraph, config: &ClusteringConfig) -> Vec<EntityCluster> {
    let clusters: Vec<EntityCluster> = graph.clusters().cloned().collect();
    if clusters.is_empty() {
        return cluster_mentions(graph, config);
    }
    let centroids: Vec<Vec<f64>> = clusters.iter().map(|c| c.centroid.clone()).collect();
    let mut groups: Vec<BTreeSet<MentionId>> = clusters.iter().map(|c| c.member_ids.clone()).collect();
    for m in graph.mentions().filter(|m| graph.cluster_of(&m.mention_id).is_none()) {
        groups[nearest(&m.embedding, &centroids).0].insert(m.mention_id.clone());
    }
    let ids = clusters.into_iter().map(|c| c.cluster_id).collect();
    build_clusters(graph, groups, ids)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LinkReport {
    pub clusters: usize,
    pub mention_relations: usize,
    pub entity_relations: usize,
    pub self_loops_dropped: usize,
    pub duplicates_collapsed: usize,
    pub participation_relations: usize,
}

/// Installs `clusters` and rewrites the entity relations at cluster level.
/// Every raw relation ends up as a cluster relation, a collapsed duplicate of
/// one, or a dropped self-loop.
pub fn link_clusters(graph: &mut EventGraph, clusters: Vec<EntityCluster>) -> Result<LinkReport, LinkError> {
    let owner: BTreeMap<&MentionId, &ClusterId> = clusters
        .iter()
        .flat_map(|c| c.member_ids.iter().map(move |m| (m, &c.cluster_id)))
        .collect();
    let lookup = |m: &MentionId| owner.get(m).copied().ok_or_else(|| GraphError::UnknownId(m.to_string()));
    let mut report = LinkReport { clusters: clusters.len(), ..LinkReport::default() };
    let mut relations = BTreeSet::new();
    for r in graph.mention_relations() {
        report.mention_relations += 1;
        let (s, t) = (lookup(&r.source)?, lookup(&r.target)?);
        if s == t {
            report.self_loops_dropped += 1;
        } else if !relations.insert(Relation::new(RelationKind::EntityEntity, s.as_str(), t.as_str(), r.label.clone())) {
            report.duplicates_collapsed += 1;
        }
    }
    report.entity_relations = relations.len();
    let mut participation: BTreeMap<(&ClusterId, &EventId), BTreeSet<&str>> = BTreeMap::new();
    for m in graph.mentions() {
        let roles = participation.entry((lookup(&m.mention_id)?, &m.event_id)).or_default();
        match &m.role {
            Some(r) => roles.extend(r.split(',')),
            None => {
                roles.insert(DEFAULT_PARTICIPATION);
            }
        }
    }
    report.participation_relations = participation.len();
    for ((c, e), roles) in participation {
        let mut roles: Vec<&str> = roles.into_iter().collect();
        if roles.len() > 1 {
            roles.retain(|r| *r != DEFAULT_PARTICIPATION);
        }
        relations.insert(Relation::new(RelationKind::EntityEvent, c.as_str(), e.as_str(), roles.join(",")));
    }
    drop(owner);
    graph.replace_entity_layer(clusters, relations)?;
    Ok(report)
}

/// Tracks how many mentions arrived since the last full clustering.
#[derive(Debug, Clone)]
pub struct EntityLinker {
    config: ClusteringConfig,
    since_recluster: usize,
}

impl EntityLinker {
    pub fn new(config: ClusteringConfig) -> Self {
        Self { config, since_recluster: 0 }
    }

    pub fn config(&self) -> &ClusteringConfig {
        &self.config
    }

    /// Extracts, embeds and records the entities of one event already in the graph.
    pub fn ingest_event(
        &mut self,
        gateway: &dyn ModelGateway,
        prompts: &PromptSet,
        graph: &mut EventGraph,
        event_id: &EventId,
    ) -> Result<usize, LinkError> {
        let event = graph.event(event_id).ok_or_else(|| GraphError::UnknownId(event_id.to_string()))?.clone();
        let result = extract_entities(gateway, prompts, &event)?;
        let mentions = embed_mentions(gateway, &result)?;
        let ids = record_mentions(graph, &result, mentions)?;
        self.since_recluster += ids.len();
        Ok(ids.len())
    }

    /// Whether enough mentions accumulated since the last full clustering.
    pub fn recluster_due(&self) -> bool {
        self.since_recluster >= self.config.recluster_every
    }

    /// Full K-means once enough mentions accumulated (or when forced),
    /// otherwise nearest-centroid placement of the newcomers.
    pub fn checkpoint(&mut self, graph: &mut EventGraph, force: bool) -> Result<LinkReport, LinkError> {
        let clusters = if force || self.since_recluster >= self.config.recluster_every {
            self.since_recluster = 0;
            cluster_mentions(graph, &self.config)
        } else {
            assign_pending(graph, &self.config)
        };
        link_clusters(graph, clusters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockGateway, MockRule, MockScript};

    fn event(id: &str, description: &str) -> EventRecord {
        EventRecord {
            event_id: id.into(),
            stream_id: "s".into(),
            start_time: 0.0,
            end_time: 3.0,
            description: description.into(),
            summary: description.into(),
            text_embedding: vec![1.0, 0.0],
            frame_refs: vec![],
        }
    }

    const TWO_ENTITIES: &str = r#"Here you go:
```json
{"entities": [{"name": "raccoon", "description": "masked mammal"}, {"name": "log", "description": "fallen tree"}],
 "relations": [{"source": "raccoon", "target": "log", "label": "climbs"}, {"source": "raccoon", "target": "owl", "label": "sees"}],
 "participations": [{"name": "raccoon", "role": "actor"}]}
```"#;

    #[test]
    fn extraction_parses_and_filters() {
        let mut script = MockScript::default();
        script.rules.push(MockRule::reply(Role::Extractor, &["raccoon"], TWO_ENTITIES));
        let gw = MockGateway::new(script);
        let r = extract_entities(&gw, &PromptSet::builtin(), &event("e1", "a raccoon climbs a log")).unwrap();
        assert_eq!(r.mentions.len(), 2);
        assert_eq!(r.mentions[0].name, "raccoon");
        assert_eq!(r.relations.len(), 1);
        assert_eq!(r.participations.len(), 1);
        assert!(matches!(
            extract_entities(&gw, &PromptSet::builtin(), &event("e2", "  ")),
            Err(LinkError::EmptyDescription(_))
        ));
    }

    #[test]
    fn malformed_output_is_retried_once() {
        let mut script = MockScript::default();
        script.rules.push(MockRule::reply(Role::Extractor, &["not valid JSON"], r#"{"entities": [{"name": "owl"}]}"#));
        script.rules.push(MockRule::reply(Role::Extractor, &[], "sorry, no"));
        let gw = MockGateway::new(script).recording();
        let r = extract_entities(&gw, &PromptSet::builtin(), &event("e1", "an owl")).unwrap();
        assert_eq!(r.mentions[0].name, "owl");
        assert_eq!(gw.requests().len(), 2);

        let mut script = MockScript::default();
        script.rules.push(MockRule::reply(Role::Extractor, &[], "never json"));
        let gw = MockGateway::new(script);
        assert!(matches!(
            extract_entities(&gw, &PromptSet::builtin(), &event("e1", "an owl")),
            Err(LinkError::Parse { .. })
        ));
    }

    #[test]
    fn embedding_batch_equals_singles() {
        let gw = MockGateway::new(MockScript::default());
        let result = ExtractionResult {
            event_id: "e1".into(),
            mentions: (0..100).map(|i| ExtractedEntity { name: format!("thing {i}"), description: String::new() }).collect(),
            relations: vec![],
            participations: vec![],
        };
        let batch = embed_mentions(&gw, &result).unwrap();
        for (i, m) in batch.iter().enumerate() {
            let single = gw.embed_text(Role::Embedder, &[format!("thing {i}")]).unwrap();
            assert_eq!(m.embedding, single[0]);
        }
        let empty = ExtractionResult { mentions: vec![], ..result };
        assert!(embed_mentions(&gw, &empty).unwrap().is_empty());
    }

    #[test]
    fn kmeans_small_cases() {
        let cfg = ClusteringConfig::default();
        let one = [[0.3f32, 0.4]];
        let pts: Vec<&[f32]> = one.iter().map(|p| p.as_slice()).collect();
        let out = kmeans(&pts, 1, &cfg);
        assert_eq!(out.assignments, vec![0]);
        assert_eq!(out.centroids, vec![vec![0.3f32 as f64, 0.4f32 as f64]]);

        let same = [[1.0f32, 0.0]; 5];
        let pts: Vec<&[f32]> = same.iter().map(|p| p.as_slice()).collect();
        let out = kmeans(&pts, 3, &cfg);
        assert_eq!(out.centroids.len(), 1);
        assert!(out.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn canonical_name_ties() {
        assert_eq!(canonical_name(["b", "a", "b", "a", "c"]), "a");
        assert_eq!(canonical_name(["raccoon", "procyon lotor", "raccoon"]), "raccoon");
        assert_eq!(canonical_name(Vec::<&str>::new()), "");
    }

    #[test]
    fn remap_keeps_ids_by_overlap() {
        let set = |ids: &[&str]| ids.iter().map(|s| MentionId::new(*s)).collect::<BTreeSet<_>>();
        let prior = vec![
            EntityCluster { cluster_id: "u0".into(), member_ids: set(&["a", "b"]), centroid: vec![], canonical_name: String::new() },
            EntityCluster { cluster_id: "u1".into(), member_ids: set(&["c"]), centroid: vec![], canonical_name: String::new() },
        ];
        let ids = remap_cluster_ids(&prior, &[set(&["c", "d"]), set(&["a", "b", "e"]), set(&["f"])]);
        assert_eq!(ids, vec![ClusterId::new("u1"), ClusterId::new("u0"), ClusterId::new("u2")]);
    }

    fn linked_graph() -> EventGraph {
        let mut g = EventGraph::new();
        for (i, id) in ["e1", "e2"].iter().enumerate() {
            let mut e = event(id, "x");
            e.start_time = i as f64 * 3.0;
            e.end_time = e.start_time + 3.0;
            g.add_event(e).unwrap();
        }
        let mention = |id: &str, ev: &str, name: &str, v: [f32; 2], role: Option<&str>| EntityMention {
            mention_id: id.into(),
            event_id: ev.into(),
            name: name.into(),
            description: String::new(),
            embedding: v.to_vec(),
            role: role.map(String::from),
        };
        g.add_mention(mention("m1", "e1", "raccoon", [1.0, 0.0], Some("actor"))).unwrap();
        g.add_mention(mention("m2", "e2", "procyon lotor", [0.99, 0.141], None)).unwrap();
        g.add_mention(mention("m3", "e2", "raccoon", [1.0, 0.0], Some("actor"))).unwrap();
        g.add_mention(mention("m4", "e1", "log", [0.0, 1.0], None)).unwrap();
        for (s, t, l) in [("m1", "m4", "climbs"), ("m3", "m4", "climbs"), ("m1", "m2", "same as")] {
            g.add_mention_relation(MentionRelation { source: s.into(), target: t.into(), label: l.into() }).unwrap();
        }
        g
    }

    #[test]
    fn linking_collapses_and_drops() {
        let mut g = linked_graph();
        let cfg = ClusteringConfig { k_policy: KPolicy::Fixed(2), ..ClusteringConfig::default() };
        let clusters = cluster_mentions(&g, &cfg);
        assert_eq!(clusters.len(), 2);
        let report = link_clusters(&mut g, clusters).unwrap();
        assert_eq!(report.mention_relations, 3);
        assert_eq!(report.self_loops_dropped, 1);
        assert_eq!(report.duplicates_collapsed, 1);
        assert_eq!(report.entity_relations, 1);
        assert_eq!(
            report.mention_relations,
            report.entity_relations + report.self_loops_dropped + report.duplicates_collapsed
        );
        let animal = g.clusters().find(|c| c.member_ids.len() == 3).unwrap();
        assert_eq!(animal.canonical_name, "raccoon");
        let linked = g.events_of_cluster(&animal.cluster_id).unwrap();
        assert_eq!(linked.events.len(), 2);
        // Two mentions of the animal in e2 give one participation relation.
        let ue: Vec<_> = g.relations_of_kind(RelationKind::EntityEvent).collect();
        assert_eq!(ue.len(), 3);
        assert!(ue.iter().any(|r| r.source_id == animal.cluster_id.as_str() && r.target_id == "e2" && r.label == "actor"));
        g.validate().unwrap();
    }

    #[test]
    fn pending_mentions_join_nearest_cluster() {
        let mut g = linked_graph();
        let mut linker = EntityLinker::new(ClusteringConfig { k_policy: KPolicy::Fixed(2), ..ClusteringConfig::default() });
        linker.checkpoint(&mut g, true).unwrap();
        g.add_mention(EntityMention {
            mention_id: "m5".into(),
            event_id: "e2".into(),
            name: "branch".into(),
            description: String::new(),
            embedding: vec![0.1, 0.995],
            role: None,
        })
        .unwrap();
        linker.checkpoint(&mut g, false).unwrap();
        let c = g.cluster_of(&"m5".into()).unwrap();
        assert!(g.cluster(c).unwrap().member_ids.contains(&MentionId::new("m4")));
        let cl = g.cluster(c).unwrap();
        let mean = g.member_mean(&cl.member_ids);
        assert!(cl.centroid.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
