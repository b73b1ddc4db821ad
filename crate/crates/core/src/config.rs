//! Application configuration file.
//!
//! A TOML document. `${NAME}` anywhere in the text is replaced by the value of
//! environment variable `NAME` before parsing; `$${` escapes a literal `${`.
//! Unknown keys are rejected. Relative paths resolve against the directory
//! of the config file.
//!
//! ```toml
//! store_path = "store"
//! scenario = "wildlife"
//!
//! [chunking]
//! chunk_seconds = 3.0
//! tau_in = 0.65
//!
//! [gateway]
//! mock_script = "mock.json"
//! [gateway.roles.describer]
//! backend = "mock"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent_search::SearchConfig;
use crate::entity_linker::ClusteringConfig;
use crate::gateway::GatewayConfig;
use crate::generation::GenerationConfig;
use crate::ingestion::ChunkingConfig;
use crate::prompts::Scenario;
use crate::retrieval::RetrievalConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config references unset environment variable `{0}`")]
    MissingEnv(String),
    #[error("unterminated `${{` in config")]
    Unterminated,
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Error,
    Warn,
    #[default]
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    pub fn as_filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

fn default_store() -> PathBuf {
    PathBuf::from("store")
}

fn default_audit() -> PathBuf {
    PathBuf::from("audit")
}

fn default_gateway() -> GatewayConfig {
    GatewayConfig::all_mock(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "default_store")]
    pub store_path: PathBuf,
    #[serde(default = "default_audit")]
    pub audit_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_dir: Option<PathBuf>,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub log_level: LogLevel,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default = "default_gateway")]
    pub gateway: GatewayConfig,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            store_path: default_store(),
            audit_dir: default_audit(),
            prompt_dir: None,
            scenario: Scenario::default(),
            log_level: LogLevel::default(),
            chunking: ChunkingConfig::default(),
            clustering: ClusteringConfig::default(),
            retrieval: RetrievalConfig::default(),
            search: SearchConfig::default(),
            generation: GenerationConfig::default(),
            gateway: default_gateway(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Replaces `${NAME}` with `lookup(NAME)`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("$${") {
            out.push_str("${");
            rest = after;
        } else if let Some(after) = tail.strip_prefix("${") {
            let end = after.find('}').ok_or(ConfigError::Unterminated)?;
            let name = &after[..end];
            out.push_str(&lookup(name).ok_or_else(|| ConfigError::MissingEnv(name.to_string()))?);
            rest = &after[end + 1..];
        } else {
            out.push('$');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

impl AppConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        let mut config: AppConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.chunking.validate().map_err(|e| bad(&e))?;
        self.clustering.validate().map_err(|e| bad(&e))?;
        self.search.validate().map_err(|e| bad(&e))?;
        self.generation.validate().map_err(|e| bad(&e))?;
        self.gateway.validate().map_err(|e| bad(&e))?;
        if self.retrieval.top_k == 0 {
            return Err(ConfigError::Invalid("retrieval.top_k must be at least 1".into()));
        }
        let w = self.retrieval.weights;
        if [w.event, w.entity, w.vision].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ConfigError::Invalid("retrieval weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn store_dir(&self) -> PathBuf {
        self.resolve(&self.store_path)
    }

    pub fn audit_path(&self) -> PathBuf {
        self.resolve(&self.audit_dir)
    }
}
