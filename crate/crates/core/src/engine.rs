//! The assembled pipeline: one graph store, one gateway, ingestion and query.
//!
//! Ingestion mutates a private working copy and publishes it to readers every
//! `flush_every` events (and at the end of each stream), persisting the
//! published state at the same time. Queries run against the latest
//! published snapshot, so they never see a half-ingested event.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::agent_search::{search, SearchContext, SearchError, SearchResult};
use crate::config::{AppConfig, ConfigError};
use crate::ekg::{EventGraph, GraphError, GraphHandle, RelationKind};
use crate::entity_linker::{EntityLinker, LinkError};
use crate::gateway::{CountingGateway, GatewayError, ModelGateway, RoleRouter};
use crate::generation::{answer_query, AuditLog, FinalAnswer, GenerationError};
use crate::index_store::{self, Manifest, StoreError, VectorIndex, SCHEMA_VERSION};
use crate::ingestion::{ingest_stream, read_source, IngestContext, IngestError, StreamInput, StreamReport};
use crate::prompts::{PromptError, PromptSet};
use crate::retrieval::RetrievalError;

pub const DEFAULT_FLUSH_EVERY: usize = 16;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("the graph is empty; ingest a stream first")]
    EmptyGraph,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Stable machine-readable failure categories shared by the CLI and HTTP API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    InvalidConfig,
    InvalidRequest,
    MissingSource,
    EmptyGraph,
    GatewayExhausted,
    StoreError,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::InvalidConfig => "INVALID_CONFIG",
            ErrorCode::InvalidRequest => "INVALID_REQUEST",
            ErrorCode::MissingSource => "MISSING_SOURCE",
            ErrorCode::EmptyGraph => "EMPTY_GRAPH",
            ErrorCode::GatewayExhausted => "GATEWAY_EXHAUSTED",
            ErrorCode::StoreError => "STORE_ERROR",
            ErrorCode::Internal => "INTERNAL",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCode::MissingSource => 2,
            ErrorCode::EmptyGraph => 3,
            ErrorCode::GatewayExhausted => 4,
            ErrorCode::InvalidConfig | ErrorCode::InvalidRequest => 64,
            ErrorCode::StoreError => 5,
            ErrorCode::Internal => 1,
        }
    }
}

impl EngineError {
    pub fn code(&self) -> ErrorCode {
        match self {
            EngineError::Config(_) | EngineError::Prompt(_) => ErrorCode::InvalidConfig,
            EngineError::InvalidRequest(_) => ErrorCode::InvalidRequest,
            EngineError::EmptyGraph => ErrorCode::EmptyGraph,
            EngineError::Gateway(_) => ErrorCode::GatewayExhausted,
            EngineError::Store(_) => ErrorCode::StoreError,
            EngineError::Ingest(IngestError::Source { .. }) => ErrorCode::MissingSource,
            EngineError::Ingest(IngestError::Gateway(_)) | EngineError::Link(LinkError::Gateway(_)) => {
                ErrorCode::GatewayExhausted
            }
            EngineError::Ingest(IngestError::Parse { .. } | IngestError::Config(_)) => ErrorCode::InvalidRequest,
            EngineError::Search(SearchError::EmptyGraph) => ErrorCode::EmptyGraph,
            EngineError::Search(SearchError::Gateway(_))
            | EngineError::Search(SearchError::Retrieval(RetrievalError::Gateway(_)))
            | EngineError::Generation(GenerationError::Gateway { .. }) => ErrorCode::GatewayExhausted,
            EngineError::Search(SearchError::Config(_)) | EngineError::Generation(GenerationError::Config(_)) => {
                ErrorCode::InvalidRequest
            }
            _ => ErrorCode::Internal,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.code().exit_code()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GraphStats {
    pub schema_version: u32,
    pub streams: usize,
    pub events: usize,
    pub mentions: usize,
    pub entities: usize,
    pub event_event_relations: usize,
    pub entity_entity_relations: usize,
    pub entity_event_relations: usize,
}

impl GraphStats {
    pub fn of(graph: &EventGraph) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            streams: graph.stream_ids().count(),
            events: graph.event_count(),
            mentions: graph.mention_count(),
            entities: graph.clusters().count(),
            event_event_relations: graph.relations_of_kind(RelationKind::EventEvent).count(),
            entity_entity_relations: graph.relations_of_kind(RelationKind::EntityEntity).count(),
            entity_event_relations: graph.relations_of_kind(RelationKind::EntityEvent).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub streams: Vec<StreamReport>,
    pub events_added: usize,
    pub mentions_added: usize,
    pub stats: GraphStats,
    pub wall_seconds: f64,
    pub gateway_calls: u64,
    /// Gateway calls divided by uniform chunks processed (skipped chunks excluded).
    pub calls_per_chunk: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryOverrides {
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub answer: String,
    pub score: f64,
    pub degraded: bool,
    pub audit_id: String,
    pub audit_path: PathBuf,
    pub leaves: usize,
    #[serde(skip)]
    pub final_answer: FinalAnswer,
    #[serde(skip)]
    pub audit: AuditLog,
}

type SharedGateway = Arc<CountingGateway<Arc<dyn ModelGateway>>>;

pub struct Engine {
    config: AppConfig,
    gateway: SharedGateway,
    prompts: PromptSet,
    graph: GraphHandle,
    index: Mutex<Option<(Arc<EventGraph>, Arc<VectorIndex>)>>,
    ingest_lock: Mutex<EntityLinker>,
    flush_every: usize,
}

impl Engine {
    /// Builds the gateway from the config and loads the store if one exists.
    pub fn open(config: AppConfig) -> Result<Self, EngineError> {
        let router = RoleRouter::from_config(&config.gateway, &config.base_dir)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Self::with_gateway(config, Arc::new(router))
    }

    pub fn with_gateway(config: AppConfig, gateway: Arc<dyn ModelGateway>) -> Result<Self, EngineError> {
        config.validate()?;
        let prompts = match &config.prompt_dir {
            Some(dir) => PromptSet::with_overrides(&config.resolve(dir))?,
            None => PromptSet::builtin(),
        };
        let store = config.store_dir();
        let graph = if store.join(index_store::MANIFEST).exists() {
            index_store::load(&store)?
        } else {
            EventGraph::new()
        };
        Ok(Self {
            gateway: Arc::new(CountingGateway::new(gateway)),
            prompts,
            graph: GraphHandle::new(graph),
            index: Mutex::new(None),
            ingest_lock: Mutex::new(EntityLinker::new(config.clustering)),
            flush_every: DEFAULT_FLUSH_EVERY,
            config,
        })
    }

    pub fn with_flush_every(mut self, n: usize) -> Self {
        self.flush_every = n.max(1);
        self
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn gateway(&self) -> &CountingGateway<Arc<dyn ModelGateway>> {
        &self.gateway
    }

    pub fn snapshot(&self) -> Arc<EventGraph> {
        self.graph.snapshot()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats::of(&self.snapshot())
    }

    pub fn ingest_source(&self, source: &str) -> Result<IngestReport, EngineError> {
        let streams = read_source(source)?;
        self.ingest(&streams)
    }

    fn publish(&self, working: &EventGraph) -> Result<(), EngineError> {
        index_store::append(working, &self.config.store_dir())?;
        self.graph.replace(working.clone());
        Ok(())
    }

    /// Ingests streams one after another; chunks already covered by stored
    /// events are skipped, so re-running a source adds nothing.
    pub fn ingest(&self, streams: &[StreamInput]) -> Result<IngestReport, EngineError> {
        let mut linker = self.ingest_lock.lock().unwrap_or_else(|e| e.into_inner());
        let started = Instant::now();
        let calls_before = self.gateway.total();
        let mut working = (*self.graph.snapshot()).clone();
        let before = (working.event_count(), working.mention_count());
        let ctx = IngestContext {
            gateway: self.gateway.as_ref(),
            prompts: &self.prompts,
            config: &self.config.chunking,
            scenario: self.config.scenario,
        };
        let mut reports = Vec::with_capacity(streams.len());
        for stream in streams {
            let existing = working.clone();
            let mut unflushed = 0usize;
            let gateway = self.gateway.as_ref();
            let prompts = &self.prompts;
            let flush_every = self.flush_every;
            let mut sink = |event: crate::ekg::EventRecord| -> Result<(), IngestError> {
                let id = event.event_id.clone();
                working.add_event(event)?;
                let sink_err = |e: LinkError| match e {
                    LinkError::Gateway(g) => IngestError::Gateway(g),
                    other => IngestError::Sink(other.to_string()),
                };
                linker.ingest_event(gateway, prompts, &mut working, &id).map_err(sink_err)?;
                unflushed += 1;
                let flush = unflushed >= flush_every;
                if flush || linker.recluster_due() {
                    linker.checkpoint(&mut working, false).map_err(sink_err)?;
                }
                if flush {
                    self.publish(&working).map_err(|e| IngestError::Sink(e.to_string()))?;
                    unflushed = 0;
                }
                Ok(())
            };
            let report = ingest_stream(&ctx, &existing, stream, &mut sink)?;
            if report.events > 0 {
                linker.checkpoint(&mut working, true)?;
            }
            self.publish(&working)?;
            reports.push(report);
        }
        let calls = self.gateway.total() - calls_before;
        let processed: usize = reports.iter().map(|r| r.chunks - r.skipped_chunks).sum();
        Ok(IngestReport {
            events_added: working.event_count() - before.0,
            mentions_added: working.mention_count() - before.1,
            stats: GraphStats::of(&working),
            streams: reports,
            wall_seconds: started.elapsed().as_secs_f64(),
            gateway_calls: calls,
            calls_per_chunk: if processed == 0 { 0.0 } else { calls as f64 / processed as f64 },
        })
    }

    fn index_for(&self, graph: &Arc<EventGraph>) -> Arc<VectorIndex> {
        let mut cache = self.index.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((g, idx)) = cache.as_ref() {
            if Arc::ptr_eq(g, graph) {
                return idx.clone();
            }
        }
        let idx = Arc::new(VectorIndex::build(graph));
        *cache = Some((graph.clone(), idx.clone()));
        idx
    }

    /// Searches the latest snapshot; does not write the audit log.
    pub fn search(&self, text: &str, overrides: QueryOverrides) -> Result<(Arc<EventGraph>, SearchResult), EngineError> {
        if text.trim().is_empty() {
            return Err(EngineError::InvalidRequest("query text is empty".into()));
        }
        let graph = self.snapshot();
        if graph.is_empty() {
            return Err(EngineError::EmptyGraph);
        }
        let index = self.index_for(&graph);
        let mut search_cfg = self.config.search;
        let mut retrieval = self.config.retrieval;
        if let Some(d) = overrides.depth {
            search_cfg.max_depth = d;
        }
        if let Some(k) = overrides.k {
            retrieval.top_k = k;
        }
        let ctx = SearchContext {
            gateway: self.gateway.as_ref(),
            graph: &graph,
            index: &index,
            prompts: &self.prompts,
            retrieval,
            config: search_cfg,
        };
        let result = search(&ctx, text)?;
        Ok((graph, result))
    }

    /// Full query: search, answer, write the audit log.
    pub fn query(&self, text: &str, overrides: QueryOverrides) -> Result<QueryOutcome, EngineError> {
        let (graph, result) = self.search(text, overrides)?;
        let answered = match answer_query(self.gateway.as_ref(), &self.prompts, &graph, &result, &self.config.generation) {
            Ok(a) => a,
            Err(GenerationError::Gateway { source, partial_audit }) => {
                if let Err(e) = partial_audit.write_to(&self.config.audit_path()) {
                    log::warn!("could not write partial audit: {e}");
                }
                return Err(EngineError::Gateway(source));
            }
            Err(e) => return Err(e.into()),
        };
        let (audit_id, audit_path) = answered.audit.write_to(&self.config.audit_path())?;
        let f = &answered.final_answer;
        Ok(QueryOutcome {
            answer: f.answer.clone(),
            score: f.score,
            degraded: f.degraded,
            audit_id,
            audit_path,
            leaves: result.sa_leaves.len(),
            final_answer: answered.final_answer.clone(),
            audit: answered.audit,
        })
    }

    pub fn manifest(&self) -> Option<Manifest> {
        Manifest::read(&self.config.store_dir()).ok()
    }
}
