//! Durable storage for the graph and exact cosine search over its vectors.
//!
//! # Store layout
//!
//! A store is a directory:
//!
//! ```text
//! manifest.json          {"schema_version":1,"dimension":D,"tables":{...}}
//! events.tbl             one record per event
//! entities.tbl           entity mentions (tag 0) and clusters (tag 1)
//! event_event_rel.tbl    before/after chain
//! entity_entity_rel.tbl  cluster relations (tag 0) and raw mention relations (tag 1)
//! entity_event_rel.tbl   participation relations
//! frames.tbl             frame references with vision vectors
//! ```
//!
//! Each table starts with the 8-byte header `VKGT` + schema version (u32 LE),
//! followed by records framed as `u32 LE payload length` + payload. Payload
//! fields are written in a fixed order: strings as `u32` byte length + UTF-8,
//! reals as `f64` LE, vectors as `u32` count + `f32` LE components, optional
//! strings as a `u8` presence flag followed by the string. The manifest lists
//! per table the file name, the record count and the committed byte length;
//! bytes past that length are ignored on load, so an interrupted append never
//! corrupts a store.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekg::{
    ClusterId, EntityCluster, EntityMention, EventGraph, EventId, EventRecord, FrameRef, GraphError,
    MentionId, MentionRelation, Relation, RelationKind, StreamId,
};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VKGT";
const HEADER_LEN: u64 = 8;
pub const MANIFEST: &str = "manifest.json";

/// Stored f32 centroids may differ from the recomputed f64 mean by rounding only.
const CENTROID_STORAGE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store schema version {found} is not supported (this build reads version {supported})")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("store integrity check failed: {}", .0.join("; "))]
    Integrity(Vec<String>),
    #[error("query dimension {actual} does not match collection dimension {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("unknown collection `{0}`")]
    UnknownCollection(String),
    #[error("K must be at least 1")]
    InvalidK,
    #[error("unknown id: {0}")]
    UnknownId(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collection {
    EventText,
    EntityCentroid,
    FrameVision,
}

impl Collection {
    pub fn as_str(self) -> &'static str {
        match self {
            Collection::EventText => "event_text",
            Collection::EntityCentroid => "entity_centroid",
            Collection::FrameVision => "frame_vision",
        }
    }
}

impl FromStr for Collection {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "event_text" => Ok(Collection::EventText),
            "entity_centroid" => Ok(Collection::EntityCentroid),
            "frame_vision" => Ok(Collection::FrameVision),
            other => Err(StoreError::UnknownCollection(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopKHit {
    pub id: String,
    /// Row that owns the vector: the event for frames and events, the cluster for centroids.
    pub owner: String,
    pub similarity: f64,
}

pub type TopKResult = Vec<TopKHit>;

/// Flat collection of equal-length vectors, each tagged with an id and owner.
#[derive(Debug, Clone, Default)]
pub struct VectorCollection {
    dimension: usize,
    ids: Vec<String>,
    owners: Vec<String>,
    data: Vec<f32>,
    norms: Vec<f64>,
}

impl VectorCollection {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn push(&mut self, id: impl Into<String>, owner: impl Into<String>, vector: &[f32]) -> Result<(), StoreError> {
        if vector.len() != self.dimension {
            return Err(StoreError::Dimension { expected: self.dimension, actual: vector.len() });
        }
        self.ids.push(id.into());
        self.owners.push(owner.into());
        self.data.extend_from_slice(vector);
        self.norms.push(vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt());
        Ok(())
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    /// Exact cosine top-K. Ties order by id so results are reproducible.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<TopKResult, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        if query.len() != self.dimension {
            return Err(StoreError::Dimension { expected: self.dimension, actual: query.len() });
        }
        let qn = query.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| {
                let denom = qn * self.norms[i];
                let sim = if denom == 0.0 {
                    0.0
                } else {
                    let d: f64 = self.vector(i).iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
                    (d / denom).clamp(-1.0, 1.0)
                };
                (sim, i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(similarity, i)| TopKHit { id: self.ids[i].clone(), owner: self.owners[i].clone(), similarity })
            .collect())
    }
}

pub fn frame_key(event: &EventId, index: usize) -> String {
    format!("{event}#{index}")
}

/// The three searchable collections, built from one graph snapshot.
#[derive(Debug, Clone, Default)]
pub struct VectorIndex {
    event_text: VectorCollection,
    entity_centroid: VectorCollection,
    frame_vision: VectorCollection,
}

impl VectorIndex {
    pub fn build(graph: &EventGraph) -> Self {
        let d = graph.dimension().unwrap_or(0);
        let mut index = Self {
            event_text: VectorCollection::new(d),
            entity_centroid: VectorCollection::new(d),
            frame_vision: VectorCollection::new(d),
        };
        for e in graph.events() {
            index
                .event_text
                .push(e.event_id.as_str(), e.event_id.as_str(), &e.text_embedding)
                .expect("graph enforces dimension");
            for (i, f) in e.frame_refs.iter().enumerate() {
                index
                    .frame_vision
                    .push(frame_key(&e.event_id, i), e.event_id.as_str(), &f.vision_embedding)
                    .expect("graph enforces dimension");
            }
        }
        for c in graph.clusters() {
            let centroid: Vec<f32> = c.centroid.iter().map(|&x| x as f32).collect();
            index
                .entity_centroid
                .push(c.cluster_id.as_str(), c.cluster_id.as_str(), &centroid)
                .expect("graph enforces dimension");
        }
        index
    }

    pub fn collection(&self, c: Collection) -> &VectorCollection {
        match c {
            Collection::EventText => &self.event_text,
            Collection::EntityCentroid => &self.entity_centroid,
            Collection::FrameVision => &self.frame_vision,
        }
    }

    pub fn top_k(&self, c: Collection, query: &[f32], k: usize) -> Result<TopKResult, StoreError> {
        self.collection(c).top_k(query, k)
    }
}

/// Frame references of the given events, ordered by timestamp, each distinct
/// frame once.
pub fn fetch_frames(graph: &EventGraph, event_ids: &[EventId]) -> Result<Vec<FrameRef>, StoreError> {
    let mut seen = HashSet::new();
    let mut frames = Vec::new();
    for id in event_ids {
        let event = graph.event(id).ok_or_else(|| StoreError::UnknownId(id.to_string()))?;
        for f in &event.frame_refs {
            if seen.insert((f.stream_id.clone(), f.timestamp.to_bits(), f.locator.clone())) {
                frames.push(f.clone());
            }
        }
    }
    frames.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.stream_id.cmp(&b.stream_id))
            .then_with(|| a.locator.cmp(&b.locator))
    });
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Record codec

#[derive(Default)]
struct RecordWriter {
    buf: Vec<u8>,
}

impl RecordWriter {
    fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    fn opt_str(&mut self, s: Option<&str>) -> &mut Self {
        match s {
            Some(s) => self.u8(1).str(s),
            None => self.u8(0),
        }
    }

    fn vec(&mut self, v: &[f32]) -> &mut Self {
        self.u32(v.len() as u32);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    fn finish(&mut self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.buf.len() as u32).to_le_bytes());
        out.append(&mut self.buf);
    }
}

struct RecordReader<'a> {
    buf: &'a [u8],
    pos: usize,
    table: &'static str,
}

impl<'a> RecordReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            StoreError::Corrupt(format!("{}: record truncated at byte {}", self.table, self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String, StoreError> {
        let n = self.u32()? as usize;
        let table = self.table;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| StoreError::Corrupt(format!("{table}: invalid UTF-8")))
    }

    fn opt_str(&mut self) -> Result<Option<String>, StoreError> {
        match self.u8()? {
            0 => Ok(None),
            1 => self.str().map(Some),
            t => Err(StoreError::Corrupt(format!("{}: bad option flag {t}", self.table))),
        }
    }

    fn vec(&mut self) -> Result<Vec<f32>, StoreError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| StoreError::Corrupt("vector too long".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn split_records<'a>(table: &'static str, body: &'a [u8]) -> Result<Vec<RecordReader<'a>>, StoreError> {
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < body.len() {
        if pos + 4 > body.len() {
            return Err(StoreError::Corrupt(format!("{table}: dangling length prefix")));
        }
        let len = u32::from_le_bytes(body[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let start = pos + 4;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| StoreError::Corrupt(format!("{table}: record overruns table")))?;
        out.push(RecordReader { buf: &body[start..end], pos: 0, table });
        pos = end;
    }
    Ok(out)
}

fn encode_event(e: &EventRecord, out: &mut Vec<u8>) {
    RecordWriter::default()
        .str(e.event_id.as_str())
        .str(e.stream_id.as_str())
        .f64(e.start_time)
        .f64(e.end_time)
        .str(&e.description)
        .str(&e.summary)
        .vec(&e.text_embedding)
        .finish(out);
}

fn encode_frames(e: &EventRecord, out: &mut Vec<u8>) {
    for f in &e.frame_refs {
        RecordWriter::default()
            .str(e.event_id.as_str())
            .str(f.stream_id.as_str())
            .f64(f.timestamp)
            .str(&f.locator)
            .vec(&f.vision_embedding)
            .finish(out);
    }
}

fn encode_relation(r: &Relation, tag: Option<u8>, out: &mut Vec<u8>) {
    let mut w = RecordWriter::default();
    if let Some(t) = tag {
        w.u8(t);
    }
    w.str(&r.source_id).str(&r.target_id).str(&r.label).finish(out);
}

// ---------------------------------------------------------------------------
// Tables and manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Table {
    Events,
    Entities,
    EventEventRel,
    EntityEntityRel,
    EntityEventRel,
    Frames,
}

impl Table {
    const ALL: [Table; 6] = [
        Table::Events,
        Table::Entities,
        Table::EventEventRel,
        Table::EntityEntityRel,
        Table::EntityEventRel,
        Table::Frames,
    ];

    fn name(self) -> &'static str {
        match self {
            Table::Events => "events",
            Table::Entities => "entities",
            Table::EventEventRel => "event_event_rel",
            Table::EntityEntityRel => "entity_entity_rel",
            Table::EntityEventRel => "entity_event_rel",
            Table::Frames => "frames",
        }
    }

    fn file(self) -> String {
        format!("{}.tbl", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub file: String,
    pub records: u64,
    /// Committed length in bytes, header included.
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dimension: Option<usize>,
    pub tables: BTreeMap<String, TableEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(MANIFEST);
        let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
        #[derive(Deserialize)]
        struct Version {
            schema_version: u32,
        }
        let v: Version = serde_json::from_str(&raw)
            .map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))?;
        if v.schema_version != SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion { found: v.schema_version, supported: SCHEMA_VERSION });
        }
        serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))
    }

    fn entry(&self, t: Table) -> Result<&TableEntry, StoreError> {
        self.tables
            .get(t.name())
            .ok_or_else(|| StoreError::Corrupt(format!("manifest lacks table {}", t.name())))
    }
}

fn header() -> Vec<u8> {
    let mut h = MAGIC.to_vec();
    h.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    h
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct EncodedTables {
    bodies: BTreeMap<Table, (Vec<u8>, u64)>,
}

fn encode_small_tables(graph: &EventGraph) -> BTreeMap<Table, (Vec<u8>, u64)> {
    let mut out = BTreeMap::new();

    let mut entities = Vec::new();
    let mut n = 0u64;
    for m in graph.mentions() {
        RecordWriter::default()
            .u8(0)
            .str(m.mention_id.as_str())
            .str(m.event_id.as_str())
            .str(&m.name)
            .str(&m.description)
            .opt_str(m.role.as_deref())
            .vec(&m.embedding)
            .finish(&mut entities);
        n += 1;
    }
    for c in graph.clusters() {
        let mut w = RecordWriter::default();
        w.u8(1).str(c.cluster_id.as_str()).str(&c.canonical_name).u32(c.member_ids.len() as u32);
        for mid in &c.member_ids {
            w.str(mid.as_str());
        }
        let centroid: Vec<f32> = c.centroid.iter().map(|&x| x as f32).collect();
        w.vec(&centroid).finish(&mut entities);
        n += 1;
    }
    out.insert(Table::Entities, (entities, n));

    for (table, kind) in [
        (Table::EventEventRel, RelationKind::EventEvent),
        (Table::EntityEventRel, RelationKind::EntityEvent),
    ] {
        let mut body = Vec::new();
        let mut n = 0u64;
        for r in graph.relations_of_kind(kind) {
            encode_relation(r, None, &mut body);
            n += 1;
        }
        out.insert(table, (body, n));
    }

    let mut uu = Vec::new();
    let mut n = 0u64;
    for r in graph.relations_of_kind(RelationKind::EntityEntity) {
        encode_relation(r, Some(0), &mut uu);
        n += 1;
    }
    for r in graph.mention_relations() {
        let rel = Relation::new(RelationKind::EntityEntity, r.source.as_str(), r.target.as_str(), r.label.clone());
        encode_relation(&rel, Some(1), &mut uu);
        n += 1;
    }
    out.insert(Table::EntityEntityRel, (uu, n));
    out
}

fn encode_all(graph: &EventGraph) -> EncodedTables {
    let mut bodies = encode_small_tables(graph);
    let (mut events, mut frames) = (Vec::new(), Vec::new());
    let mut frame_count = 0u64;
    for e in graph.events() {
        encode_event(e, &mut events);
        encode_frames(e, &mut frames);
        frame_count += e.frame_refs.len() as u64;
    }
    bodies.insert(Table::Events, (events, graph.event_count() as u64));
    bodies.insert(Table::Frames, (frames, frame_count));
    EncodedTables { bodies }
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), StoreError> {
    let mut json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &json)
}

/// Writes the whole graph. Re-persisting an unchanged graph produces
/// identical bytes.
pub fn persist(graph: &EventGraph, dir: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let encoded = encode_all(graph);
    let mut tables = BTreeMap::new();
    for t in Table::ALL {
        let (body, records) = &encoded.bodies[&t];
        let mut bytes = header();
        bytes.extend_from_slice(body);
        write_atomic(&dir.join(t.file()), &bytes)?;
        tables.insert(
            t.name().to_string(),
            TableEntry { file: t.file(), records: *records, bytes: bytes.len() as u64 },
        );
    }
    write_manifest(dir, &Manifest { schema_version: SCHEMA_VERSION, dimension: graph.dimension(), tables })
}

fn read_table(dir: &Path, manifest: &Manifest, t: Table) -> Result<Vec<u8>, StoreError> {
    let entry = manifest.entry(t)?;
    let path = dir.join(&entry.file);
    let mut bytes = fs::read(&path).map_err(io_err(&path))?;
    if (bytes.len() as u64) < entry.bytes || entry.bytes < HEADER_LEN {
        return Err(StoreError::Corrupt(format!(
            "{}: {} bytes on disk, manifest commits {}",
            entry.file,
            bytes.len(),
            entry.bytes
        )));
    }
    bytes.truncate(entry.bytes as usize);
    if &bytes[..4] != MAGIC {
        return Err(StoreError::Corrupt(format!("{}: bad magic", entry.file)));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion { found: version, supported: SCHEMA_VERSION });
    }
    Ok(bytes.split_off(HEADER_LEN as usize))
}

/// Appends events not yet stored (and their frames) to the append-only
/// tables and rewrites the entity and relation tables. Falls back to a full
/// [`persist`] when the store is missing or holds events the graph no longer has.
pub fn append(graph: &EventGraph, dir: &Path) -> Result<(), StoreError> {
    if !dir.join(MANIFEST).exists() {
        return persist(graph, dir);
    }
    let manifest = Manifest::read(dir)?;
    let events_body = read_table(dir, &manifest, Table::Events)?;
    let mut stored = BTreeSet::new();
    for mut r in split_records("events", &events_body)? {
        stored.insert(EventId::new(r.str()?));
    }
    if stored.iter().any(|id| graph.event(id).is_none()) || manifest.dimension.is_some_and(|d| Some(d) != graph.dimension()) {
        return persist(graph, dir);
    }

    let mut tables = manifest.tables.clone();
    let (mut new_events, mut new_frames) = (Vec::new(), Vec::new());
    let (mut n_events, mut n_frames) = (0u64, 0u64);
    for e in graph.events().filter(|e| !stored.contains(&e.event_id)) {
        encode_event(e, &mut new_events);
        encode_frames(e, &mut new_frames);
        n_events += 1;
        n_frames += e.frame_refs.len() as u64;
    }
    for (t, body, n) in [(Table::Events, new_events, n_events), (Table::Frames, new_frames, n_frames)] {
        let entry = manifest.entry(t)?.clone();
        let path = dir.join(&entry.file);
        let mut file = fs::OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
        file.set_len(entry.bytes).map_err(io_err(&path))?;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0)).map_err(io_err(&path))?;
        file.write_all(&body).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))?;
        tables.insert(
            t.name().to_string(),
            TableEntry { file: entry.file, records: entry.records + n, bytes: entry.bytes + body.len() as u64 },
        );
    }
    for (t, (body, records)) in encode_small_tables(graph) {
        let mut bytes = header();
        bytes.extend_from_slice(&body);
        write_atomic(&dir.join(t.file()), &bytes)?;
        tables.insert(t.name().to_string(), TableEntry { file: t.file(), records, bytes: bytes.len() as u64 });
    }
    write_manifest(dir, &Manifest { schema_version: SCHEMA_VERSION, dimension: graph.dimension(), tables })
}

fn graph_err(e: GraphError) -> StoreError {
    match e {
        GraphError::Integrity(p) => StoreError::Integrity(p),
        other => StoreError::Integrity(vec![other.to_string()]),
    }
}

/// Reads a store back into a graph, failing on any dangling reference.
pub fn load(dir: &Path) -> Result<EventGraph, StoreError> {
    let manifest = Manifest::read(dir)?;
    let mut graph = match manifest.dimension {
        Some(d) => EventGraph::with_dimension(d),
        None => EventGraph::new(),
    };

    let frames_body = read_table(dir, &manifest, Table::Frames)?;
    let mut frames: BTreeMap<EventId, Vec<FrameRef>> = BTreeMap::new();
    for mut r in split_records("frames", &frames_body)? {
        let event = EventId::new(r.str()?);
        frames.entry(event).or_default().push(FrameRef {
            stream_id: StreamId::new(r.str()?),
            timestamp: r.f64()?,
            locator: r.str()?,
            vision_embedding: r.vec()?,
        });
    }

    let events_body = read_table(dir, &manifest, Table::Events)?;
    let mut problems = Vec::new();
    for mut r in split_records("events", &events_body)? {
        let event_id = EventId::new(r.str()?);
        let event = EventRecord {
            stream_id: StreamId::new(r.str()?),
            start_time: r.f64()?,
            end_time: r.f64()?,
            description: r.str()?,
            summary: r.str()?,
            text_embedding: r.vec()?,
            frame_refs: frames.remove(&event_id).unwrap_or_default(),
            event_id,
        };
        if let Err(e) = graph.add_event(event) {
            problems.push(e.to_string());
        }
    }
    for orphan in frames.keys() {
        problems.push(format!("frames reference unknown event {orphan}"));
    }

    let ee_body = read_table(dir, &manifest, Table::EventEventRel)?;
    let mut stored_ee = BTreeSet::new();
    for mut r in split_records("event_event_rel", &ee_body)? {
        stored_ee.insert(Relation::new(RelationKind::EventEvent, r.str()?, r.str()?, r.str()?));
    }
    let derived_ee: BTreeSet<Relation> = graph.relations_of_kind(RelationKind::EventEvent).cloned().collect();
    for r in stored_ee.symmetric_difference(&derived_ee) {
        problems.push(format!("event-event relation {} -> {} ({}) does not match the event chain", r.source_id, r.target_id, r.label));
    }

    let entities_body = read_table(dir, &manifest, Table::Entities)?;
    let mut clusters = Vec::new();
    let mut stored_centroids = Vec::new();
    for mut r in split_records("entities", &entities_body)? {
        match r.u8()? {
            0 => {
                let mention = EntityMention {
                    mention_id: MentionId::new(r.str()?),
                    event_id: EventId::new(r.str()?),
                    name: r.str()?,
                    description: r.str()?,
                    role: r.opt_str()?,
                    embedding: r.vec()?,
                };
                if let Err(e) = graph.add_mention(mention) {
                    problems.push(e.to_string());
                }
            }
            1 => {
                let cluster_id = ClusterId::new(r.str()?);
                let canonical_name = r.str()?;
                let n = r.u32()? as usize;
                let mut member_ids = BTreeSet::new();
                for _ in 0..n {
                    member_ids.insert(MentionId::new(r.str()?));
                }
                stored_centroids.push(r.vec()?);
                clusters.push(EntityCluster { cluster_id, member_ids, centroid: Vec::new(), canonical_name });
            }
            t => return Err(StoreError::Corrupt(format!("entities: unknown row tag {t}"))),
        }
    }

    let uu_body = read_table(dir, &manifest, Table::EntityEntityRel)?;
    let mut relations = BTreeSet::new();
    for mut r in split_records("entity_entity_rel", &uu_body)? {
        let tag = r.u8()?;
        let (s, t, l) = (r.str()?, r.str()?, r.str()?);
        match tag {
            0 => {
                relations.insert(Relation::new(RelationKind::EntityEntity, s, t, l));
            }
            1 => {
                let rel = MentionRelation { source: MentionId::new(s), target: MentionId::new(t), label: l };
                if let Err(e) = graph.add_mention_relation(rel) {
                    problems.push(e.to_string());
                }
            }
            t => return Err(StoreError::Corrupt(format!("entity_entity_rel: unknown row tag {t}"))),
        }
    }
    let ue_body = read_table(dir, &manifest, Table::EntityEventRel)?;
    for mut r in split_records("entity_event_rel", &ue_body)? {
        relations.insert(Relation::new(RelationKind::EntityEvent, r.str()?, r.str()?, r.str()?));
    }
    if !problems.is_empty() {
        return Err(StoreError::Integrity(problems));
    }

    for (cluster, stored) in clusters.iter_mut().zip(&stored_centroids) {
        if let Some(bad) = cluster.member_ids.iter().find(|m| graph.mention(m).is_none()) {
            problems.push(format!("cluster {} lists unknown mention {bad}", cluster.cluster_id));
            continue;
        }
        cluster.centroid = graph.member_mean(&cluster.member_ids);
        let drift = cluster
            .centroid
            .iter()
            .zip(stored)
            .map(|(&a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max);
        if stored.len() != cluster.centroid.len() || drift > CENTROID_STORAGE_TOLERANCE {
            problems.push(format!("cluster {} centroid does not match its members", cluster.cluster_id));
        }
    }
    if !problems.is_empty() {
        return Err(StoreError::Integrity(problems));
    }
    graph.replace_entity_layer(clusters, relations).map_err(graph_err)?;
    graph.validate().map_err(graph_err)?;
    Ok(graph)
}
