//! From frame streams to event records.
//!
//! Frames are bucketed into fixed-length uniform chunks, each chunk is
//! captioned by the describer, and neighbouring chunks are merged greedily
//! while every pair inside the growing group stays above `tau_in`. Each merged
//! group is summarized, embedded and handed to a sink as one [`EventRecord`].
//!
//! # Stream sources
//!
//! A frame list is plain text, one frame per line:
//!
//! ```text
//! # stream_id, timestamp_seconds, locator
//! cam1, 0.0, file:///data/cam1/000000.jpg
//! cam1, 1.0, file:///data/cam1/000001.jpg
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Lines of several
//! streams may be interleaved; each stream's timestamps must not decrease.
//! Its end is taken as the last timestamp plus the last frame gap.
//!
//! A synthetic stream is a JSON object (or array of objects):
//!
//! ```json
//! {"stream_id": "s", "chunks": 18, "frames_per_chunk": 2, "chunk_seconds": 3.0}
//! ```
//!
//! producing frames `synthetic://<stream>/<chunk:06>/<j>` evenly spaced inside
//! each chunk and an explicit end of `chunks * chunk_seconds`.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekg::{EventGraph, EventId, EventRecord, FrameRef, GraphError, StreamId};
use crate::gateway::{GatewayError, ModelGateway, Role, Sampling};
use crate::prompts::{PromptError, PromptSet, Scenario};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("stream {0} has no frames")]
    EmptyStream(String),
    #[error("stream {stream}: frame at {timestamp} s is out of order or invalid")]
    Unordered { stream: String, timestamp: f64 },
    #[error("stream {stream}: chunk {chunk_index} has no frames")]
    FramelessChunk { stream: String, chunk_index: usize },
    #[error("empty model response while {0}")]
    EmptyResponse(String),
    #[error("similarity matrix has size {actual}, expected {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("invalid chunking configuration: {0}")]
    Config(String),
    #[error("source line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading {path}: {message}")]
    Source { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkingConfig {
    pub chunk_seconds: f64,
    pub tau_in: f64,
    pub tau_bound: f64,
    pub max_merge_span: usize,
    /// Chunks captioned concurrently before merging resumes.
    pub describe_batch: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { chunk_seconds: 3.0, tau_in: 0.65, tau_bound: 0.50, max_merge_span: 64, describe_batch: 8 }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let fail = |m: &str| Err(IngestError::Config(m.to_string()));
        if !(self.chunk_seconds.is_finite() && self.chunk_seconds > 0.0) {
            return fail("chunk_seconds must be positive");
        }
        if !(self.tau_in > 0.0 && self.tau_in < 1.0) || !(self.tau_bound > 0.0 && self.tau_bound < 1.0) {
            return fail("tau_in and tau_bound must lie in (0, 1)");
        }
        if self.tau_bound > self.tau_in {
            return fail("tau_bound must not exceed tau_in");
        }
        if self.max_merge_span == 0 || self.describe_batch == 0 {
            return fail("max_merge_span and describe_batch must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameInput {
    pub stream_id: StreamId,
    pub timestamp: f64,
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamInput {
    pub stream_id: StreamId,
    pub frames: Vec<FrameInput>,
    pub end_time: Option<f64>,
}

impl StreamInput {
    /// Frames strictly before `t`, ending the stream at `t`.
    pub fn split_at(&self, t: f64) -> (StreamInput, StreamInput) {
        let (a, b): (Vec<_>, Vec<_>) = self.frames.iter().cloned().partition(|f| f.timestamp < t);
        (
            StreamInput { stream_id: self.stream_id.clone(), frames: a, end_time: Some(t) },
            StreamInput { stream_id: self.stream_id.clone(), frames: b, end_time: self.end_time },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformChunk {
    pub stream_id: StreamId,
    pub chunk_index: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub frames: Vec<FrameInput>,
    pub description: Option<String>,
}

/// Tiles the stream into chunks of `chunk_seconds`; the last one may be shorter.
/// Chunk indices are absolute (`floor(start / chunk_seconds)`), so a stream
/// resumed later lines up with what was already ingested.
pub fn buffer_uniform(stream: &StreamInput, config: &ChunkingConfig) -> Result<Vec<UniformChunk>, IngestError> {
    let name = stream.stream_id.to_string();
    let len = config.chunk_seconds;
    let frames = &stream.frames;
    let (Some(first), Some(last)) = (frames.first(), frames.last()) else {
        return Err(IngestError::EmptyStream(name));
    };
    for w in frames.windows(2) {
        if !(w[1].timestamp >= w[0].timestamp) {
            return Err(IngestError::Unordered { stream: name, timestamp: w[1].timestamp });
        }
    }
    if !(first.timestamp.is_finite() && first.timestamp >= 0.0) {
        return Err(IngestError::Unordered { stream: name, timestamp: first.timestamp });
    }
    let end = match stream.end_time {
        Some(e) => e,
        None if frames.len() >= 2 => {
            let gap = last.timestamp - frames[frames.len() - 2].timestamp;
            last.timestamp + if gap > 0.0 { gap } else { len }
        }
        None => (last.timestamp / len).floor() * len + len,
    };
    if !(end > last.timestamp) {
        return Err(IngestError::Unordered { stream: name, timestamp: last.timestamp });
    }
    let first_index = (first.timestamp / len).floor() as usize;
    let last_index = ((end / len).ceil() as usize).max(first_index + 1) - 1;
    let mut chunks: Vec<UniformChunk> = (first_index..=last_index)
        .map(|i| UniformChunk {
            stream_id: stream.stream_id.clone(),
            chunk_index: i,
            start_time: i as f64 * len,
            end_time: ((i + 1) as f64 * len).min(end),
            frames: Vec::new(),
            description: None,
        })
        .collect();
    for f in frames {
        let i = ((f.timestamp / len).floor() as usize).min(last_index) - first_index;
        chunks[i].frames.push(f.clone());
    }
    Ok(chunks)
}

/// Symmetric pair-score matrix with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self { n, values }
    }

    /// Builds the matrix from `f(i, j)` evaluated for `i < j`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::identity(n);
        for i in 0..n {
            for j in i + 1..n {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        if i == j {
            return;
        }
        let v = v.clamp(-1.0, 1.0);
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }
}

/// Scores every pair of descriptions with the scorer role, in parallel.
pub fn pairwise_similarity(gateway: &dyn ModelGateway, descriptions: &[String]) -> Result<SimilarityMatrix, IngestError> {
    let n = descriptions.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let scores = pairs
        .par_iter()
        .map(|&(i, j)| gateway.pair_score(Role::Scorer, &descriptions[i], &descriptions[j]))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut m = SimilarityMatrix::identity(n);
    for ((i, j), s) in pairs.into_iter().zip(scores) {
        m.set(i, j, s);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    /// The next chunk scored at or below `tau_in` against some member.
    Dissimilar,
    /// The group reached `max_merge_span`.
    Span,
    /// The input ended or was interrupted.
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedGroup {
    pub range: Range<usize>,
    pub reason: CloseReason,
    /// Score between this group's last chunk and the next group's first chunk.
    pub boundary_similarity: Option<f64>,
}

/// Left-to-right greedy grouping over consecutive positions. Scores are only
/// requested between the incoming chunk and members of the open group.
#[derive(Debug, Clone)]
pub struct GreedyMerger {
    tau_in: f64,
    tau_bound: f64,
    max_span: usize,
    open: Option<Range<usize>>,
}

impl GreedyMerger {
    pub fn new(config: &ChunkingConfig) -> Self {
        Self { tau_in: config.tau_in, tau_bound: config.tau_bound, max_span: config.max_merge_span, open: None }
    }

    pub fn open_range(&self) -> Option<Range<usize>> {
        self.open.clone()
    }

    /// Feeds the next position. Returns the group that this position closed, if any.
    pub fn push<E>(
        &mut self,
        pos: usize,
        mut score: impl FnMut(usize, usize) -> Result<f64, E>,
    ) -> Result<Option<ClosedGroup>, E> {
        let Some(open) = self.open.clone() else {
            self.open = Some(pos..pos + 1);
            return Ok(None);
        };
        debug_assert_eq!(open.end, pos, "positions must be consecutive");
        if open.len() >= self.max_span {
            self.open = Some(pos..pos + 1);
            return Ok(Some(ClosedGroup { range: open, reason: CloseReason::Span, boundary_similarity: None }));
        }
        let boundary = score(open.end - 1, pos)?;
        let mut joins = boundary > self.tau_in;
        if joins {
            for member in open.clone().rev().skip(1) {
                if score(member, pos)? <= self.tau_in {
                    joins = false;
                    break;
                }
            }
        }
        if joins {
            self.open = Some(open.start..pos + 1);
            return Ok(None);
        }
        if boundary > self.tau_bound {
            log::debug!("soft boundary at position {pos}: similarity {boundary:.3}");
        }
        self.open = Some(pos..pos + 1);
        Ok(Some(ClosedGroup { range: open, reason: CloseReason::Dissimilar, boundary_similarity: Some(boundary) }))
    }

    pub fn finish(&mut self) -> Option<ClosedGroup> {
        self.open
            .take()
            .map(|range| ClosedGroup { range, reason: CloseReason::End, boundary_similarity: None })
    }
}

/// Full-matrix grouping of `chunk_count` chunks.
pub fn merge_semantic(
    chunk_count: usize,
    matrix: &SimilarityMatrix,
    config: &ChunkingConfig,
) -> Result<Vec<Range<usize>>, IngestError> {
    if matrix.size() != chunk_count {
        return Err(IngestError::SizeMismatch { expected: chunk_count, actual: matrix.size() });
    }
    let mut merger = GreedyMerger::new(config);
    let mut groups = Vec::new();
    for pos in 0..chunk_count {
        if let Some(g) = merger.push(pos, |i, j| Ok::<_, IngestError>(matrix.get(i, j)))? {
            groups.push(g.range);
        }
    }
    groups.extend(merger.finish().map(|g| g.range));
    Ok(groups)
}

fn fmt_secs(t: f64) -> String {
    format!("{t:.2}")
}

pub fn describe_chunk(
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    scenario: Scenario,
    chunk: &UniformChunk,
) -> Result<String, IngestError> {
    if chunk.frames.is_empty() {
        return Err(IngestError::FramelessChunk { stream: chunk.stream_id.to_string(), chunk_index: chunk.chunk_index });
    }
    let mut prompt = prompts.get(scenario.template_name())?.trim_end().to_string();
    prompt.push_str(&prompts.render(
        "describe_segment",
        &[
            ("stream", chunk.stream_id.as_str()),
            ("start", &fmt_secs(chunk.start_time)),
            ("end", &fmt_secs(chunk.end_time)),
        ],
    )?);
    let locators: Vec<String> = chunk.frames.iter().map(|f| f.locator.clone()).collect();
    let text = gateway.vision_chat(Role::Describer, &locators, &prompt, Sampling::default())?;
    let text = text.trim();
    if text.is_empty() {
        return Err(IngestError::EmptyResponse(format!(
            "describing chunk {} of stream {}",
            chunk.chunk_index, chunk.stream_id
        )));
    }
    Ok(text.to_string())
}

pub fn summarize_semantic(
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    descriptions: &[String],
) -> Result<String, IngestError> {
    let prompt = prompts.render("summarize", &[("descriptions", &descriptions.join("\n"))])?;
    let text = gateway.chat(Role::Describer, vec![crate::gateway::ChatMessage::user(prompt)], Sampling::default())?;
    let text = text.trim();
    if text.is_empty() {
        return Err(IngestError::EmptyResponse("summarizing a semantic chunk".into()));
    }
    Ok(text.to_string())
}

pub fn event_id_for(stream: &StreamId, first_chunk: usize) -> EventId {
    EventId::new(format!("{stream}#{first_chunk:06}"))
}

/// Summarizes and embeds a group of described chunks.
pub fn build_event(
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    chunks: &[UniformChunk],
) -> Result<EventRecord, IngestError> {
    let (first, last) = (&chunks[0], &chunks[chunks.len() - 1]);
    let descriptions: Vec<String> = chunks.iter().map(|c| c.description.clone().unwrap_or_default()).collect();
    let summary = summarize_semantic(gateway, prompts, &descriptions)?;
    let text_embedding = gateway
        .embed_text(Role::Embedder, std::slice::from_ref(&summary))?
        .pop()
        .ok_or_else(|| IngestError::EmptyResponse("embedding an event summary".into()))?;
    let frames: Vec<&FrameInput> = chunks.iter().flat_map(|c| &c.frames).collect();
    let locators: Vec<String> = frames.iter().map(|f| f.locator.clone()).collect();
    let vectors = gateway.embed_image(Role::Embedder, &locators)?;
    let frame_refs = frames
        .into_iter()
        .zip(vectors)
        .map(|(f, v)| FrameRef {
            stream_id: f.stream_id.clone(),
            timestamp: f.timestamp,
            vision_embedding: v,
            locator: f.locator.clone(),
        })
        .collect();
    Ok(EventRecord {
        event_id: event_id_for(&first.stream_id, first.chunk_index),
        stream_id: first.stream_id.clone(),
        start_time: first.start_time,
        end_time: last.end_time,
        description: descriptions.join("\n"),
        summary,
        text_embedding,
        frame_refs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamReport {
    pub stream_id: StreamId,
    pub chunks: usize,
    pub skipped_chunks: usize,
    pub events: usize,
    /// Groups closed with a boundary score above `tau_bound`.
    pub soft_boundaries: usize,
    pub groups: Vec<ClosedGroup>,
}

pub struct IngestContext<'a> {
    pub gateway: &'a dyn ModelGateway,
    pub prompts: &'a PromptSet,
    pub config: &'a ChunkingConfig,
    pub scenario: Scenario,
}

fn covered_spans(existing: &EventGraph, stream: &StreamId) -> Vec<(f64, f64)> {
    existing.stream_events(stream).iter().map(|e| (e.start_time, e.end_time)).collect()
}

fn is_covered(spans: &[(f64, f64)], chunk: &UniformChunk) -> bool {
    const EPS: f64 = 1e-9;
    spans.iter().any(|&(s, e)| s <= chunk.start_time + EPS && e + EPS >= chunk.end_time)
}

/// Runs the whole pipeline over one stream, handing each finished event to
/// `sink` as soon as its group closes. Chunks already covered by events in
/// `existing` are skipped, so re-running over the same input adds nothing.
pub fn ingest_stream(
    ctx: &IngestContext<'_>,
    existing: &EventGraph,
    stream: &StreamInput,
    sink: &mut dyn FnMut(EventRecord) -> Result<(), IngestError>,
) -> Result<StreamReport, IngestError> {
    ctx.config.validate()?;
    let chunks = buffer_uniform(stream, ctx.config)?;
    let spans = covered_spans(existing, &stream.stream_id);
    let mut report = StreamReport {
        stream_id: stream.stream_id.clone(),
        chunks: chunks.len(),
        skipped_chunks: 0,
        events: 0,
        soft_boundaries: 0,
        groups: Vec::new(),
    };
    let mut merger = GreedyMerger::new(ctx.config);
    let mut open: BTreeMap<usize, UniformChunk> = BTreeMap::new();

    let mut emit = |group: ClosedGroup,
                    open: &mut BTreeMap<usize, UniformChunk>,
                    report: &mut StreamReport|
     -> Result<(), IngestError> {
        let members: Vec<UniformChunk> = group.range.clone().filter_map(|i| open.remove(&i)).collect();
        let event = build_event(ctx.gateway, ctx.prompts, &members)?;
        if group.boundary_similarity.is_some_and(|b| b > ctx.config.tau_bound) {
            report.soft_boundaries += 1;
        }
        report.groups.push(group);
        report.events += 1;
        sink(event)
    };

    for batch in chunks.chunks(ctx.config.describe_batch) {
        let described: Vec<Option<String>> = batch
            .par_iter()
            .map(|c| {
                if is_covered(&spans, c) {
                    Ok(None)
                } else {
                    describe_chunk(ctx.gateway, ctx.prompts, ctx.scenario, c).map(Some)
                }
            })
            .collect::<Result<_, IngestError>>()?;
        for (chunk, description) in batch.iter().zip(described) {
            let Some(description) = description else {
                report.skipped_chunks += 1;
                if let Some(g) = merger.finish() {
                    emit(g, &mut open, &mut report)?;
                }
                continue;
            };
            let pos = chunk.chunk_index;
            open.insert(pos, UniformChunk { description: Some(description), ..chunk.clone() });
            let closed = merger.push(pos, |i, j| {
                let text = |k: usize| open[&k].description.as_deref().unwrap_or_default();
                ctx.gateway.pair_score(Role::Scorer, text(i), text(j))
            })?;
            if let Some(g) = closed {
                emit(g, &mut open, &mut report)?;
            }
        }
    }
    if let Some(g) = merger.finish() {
        emit(g, &mut open, &mut report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticStream {
    pub stream_id: StreamId,
    pub chunks: usize,
    #[serde(default = "one")]
    pub frames_per_chunk: usize,
    #[serde(default = "three")]
    pub chunk_seconds: f64,
}

fn one() -> usize {
    1
}

fn three() -> f64 {
    3.0
}

impl SyntheticStream {
    pub fn locator(stream: &StreamId, chunk: usize, frame: usize) -> String {
        format!("synthetic://{stream}/{chunk:06}/{frame}")
    }

    pub fn expand(&self) -> StreamInput {
        let fpc = self.frames_per_chunk.max(1);
        let step = self.chunk_seconds / fpc as f64;
        let frames = (0..self.chunks)
            .flat_map(|c| (0..fpc).map(move |j| (c, j)))
            .map(|(c, j)| FrameInput {
                stream_id: self.stream_id.clone(),
                timestamp: c as f64 * self.chunk_seconds + (j as f64 + 0.5) * step,
                locator: Self::locator(&self.stream_id, c, j),
            })
            .collect();
        StreamInput {
            stream_id: self.stream_id.clone(),
            frames,
            end_time: Some(self.chunks as f64 * self.chunk_seconds),
        }
    }
}

pub fn parse_frame_list(text: &str) -> Result<Vec<StreamInput>, IngestError> {
    let mut streams: Vec<StreamInput> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| IngestError::Parse { line: n + 1, message };
        let mut parts = line.splitn(3, ',').map(str::trim);
        let (Some(stream), Some(ts), Some(locator)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err("expected `stream_id, timestamp_seconds, locator`".into()));
        };
        if stream.is_empty() || locator.is_empty() {
            return Err(parse_err("stream id and locator must be non-empty".into()));
        }
        let timestamp: f64 = ts.parse().map_err(|_| parse_err(format!("bad timestamp `{ts}`")))?;
        let stream_id = StreamId::new(stream);
        let frame = FrameInput { stream_id: stream_id.clone(), timestamp, locator: locator.to_string() };
        match streams.iter_mut().find(|s| s.stream_id == stream_id) {
            Some(s) => s.frames.push(frame),
            None => streams.push(StreamInput { stream_id, frames: vec![frame], end_time: None }),
        }
    }
    Ok(streams)
}

/// Parses a source body: JSON synthetic streams, otherwise a frame list.
pub fn parse_source(text: &str) -> Result<Vec<StreamInput>, IngestError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum OneOrMany {
            One(SyntheticStream),
            Many(Vec<SyntheticStream>),
        }
        let parsed: OneOrMany = serde_json::from_str(text).map_err(|e| IngestError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let specs = match parsed {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        };
        return Ok(specs.iter().map(SyntheticStream::expand).collect());
    }
    parse_frame_list(text)
}

/// Reads a source from a local path or an http(s) URL.
pub fn read_source(source: &str) -> Result<Vec<StreamInput>, IngestError> {
    let err = |message: String| IngestError::Source { path: source.to_string(), message };
    let body = if source.starts_with("http://") || source.starts_with("https://") {
        let resp = reqwest::blocking::get(source).map_err(|e| err(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(err(format!("HTTP {}", resp.status())));
        }
        resp.text().map_err(|e| err(e.to_string()))?
    } else {
        std::fs::read_to_string(Path::new(source)).map_err(|e| err(e.to_string()))?
    };
    parse_source(&body)
}
