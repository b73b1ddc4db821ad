use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use vidkg::config::AppConfig;
use vidkg::engine::{Engine, EngineError, ErrorCode, IngestReport, QueryOverrides};
use vidkg_cli::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "vidkg", version, about = "Index long video streams into an event graph and answer questions about them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or extend the graph store from a stream source.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        /// Frame list, synthetic stream JSON, or an http(s) URL serving either.
        #[arg(long)]
        source: String,
    },
    /// Answer a question from the stored graph.
    Query {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        text: String,
        /// Search depth override.
        #[arg(long)]
        depth: Option<usize>,
        /// Per-view retrieval depth override.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn fail(e: &EngineError) -> ExitCode {
    eprintln!("error [{}]: {e}", e.code().as_str());
    ExitCode::from(e.exit_code() as u8)
}

fn load(path: &Path) -> Result<Engine, EngineError> {
    let config = AppConfig::load(path)?;
    let _ = env_logger::Builder::new()
        .filter_level(config.log_level.as_filter())
        .parse_default_env()
        .try_init();
    Engine::open(config)
}

fn print_report(r: &IngestReport) {
    for s in &r.streams {
        println!(
            "stream {}: {} chunks ({} already indexed), {} events, {} soft boundaries",
            s.stream_id, s.chunks, s.skipped_chunks, s.events, s.soft_boundaries
        );
    }
    println!("events added: {}", r.events_added);
    println!("mentions added: {}", r.mentions_added);
    println!(
        "graph: {} events, {} entities, {} mentions, {} event-event, {} entity-entity, {} entity-event relations",
        r.stats.events,
        r.stats.entities,
        r.stats.mentions,
        r.stats.event_event_relations,
        r.stats.entity_entity_relations,
        r.stats.entity_event_relations
    );
    println!("gateway calls: {} ({:.2} per chunk)", r.gateway_calls, r.calls_per_chunk);
    println!("wall time: {:.3} s", r.wall_seconds);
}

fn serve(engine: Engine, host: &str, port: u16) -> Result<(), String> {
    let state = AppState::new(Arc::new(engine));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await.map_err(|e| e.to_string())?;
        log::info!("listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
        eprintln!("listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
        axum::serve(listener, router(state)).await.map_err(|e| e.to_string())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { config, source } => {
            let engine = match load(&config) {
                Ok(e) => e,
                Err(e) => return fail(&e),
            };
            match engine.ingest_source(&source) {
                Ok(report) => {
                    print_report(&report);
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Query { config, text, depth, k } => {
            let engine = match load(&config) {
                Ok(e) => e,
                Err(e) => return fail(&e),
            };
            match engine.query(&text, QueryOverrides { depth, k }) {
                Ok(out) => {
                    println!("answer: {}", out.answer);
                    println!("score: {:.6}", out.score);
                    if out.degraded {
                        println!("degraded: frame check failed, answer taken from the event notes");
                    }
                    println!("audit: {}", out.audit_path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Serve { config, port, host } => {
            let engine = match load(&config) {
                Ok(e) => e,
                Err(e) => return fail(&e),
            };
            match serve(engine, &host, port) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error [{}]: {e}", ErrorCode::Internal.as_str());
                    ExitCode::from(ErrorCode::Internal.exit_code() as u8)
                }
            }
        }
    }
}
