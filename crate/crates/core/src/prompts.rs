//! Prompt templates.
//!
//! Built-in templates are compiled in; a directory of `<name>.txt` files can
//! override any of them. Placeholders are written `{name}` and only the names
//! passed to [`PromptSet::render`] are substituted, so literal braces (JSON
//! examples) survive untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN: &[(&str, &str)] = &[
    ("describe_general", include_str!("../prompts/describe_general.txt")),
    ("describe_daily_activities", include_str!("../prompts/describe_daily_activities.txt")),
    ("describe_city_walking", include_str!("../prompts/describe_city_walking.txt")),
    ("describe_traffic", include_str!("../prompts/describe_traffic.txt")),
    ("describe_wildlife", include_str!("../prompts/describe_wildlife.txt")),
    ("describe_segment", include_str!("../prompts/describe_segment.txt")),
    ("summarize", include_str!("../prompts/summarize.txt")),
    ("extract", include_str!("../prompts/extract.txt")),
    ("extract_retry", include_str!("../prompts/extract_retry.txt")),
    ("requery", include_str!("../prompts/requery.txt")),
    ("answer", include_str!("../prompts/answer.txt")),
    ("check_frames", include_str!("../prompts/check_frames.txt")),
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no prompt template named `{0}`")]
    Unknown(String),
    #[error("reading prompt directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which description template drives chunk captioning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    General,
    DailyActivities,
    CityWalking,
    Traffic,
    Wildlife,
}

impl Scenario {
    pub fn template_name(self) -> &'static str {
        match self {
            Scenario::General => "describe_general",
            Scenario::DailyActivities => "describe_daily_activities",
            Scenario::CityWalking => "describe_city_walking",
            Scenario::Traffic => "describe_traffic",
            Scenario::Wildlife => "describe_wildlife",
        }
    }
}

impl FromStr for Scenario {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "general" => Ok(Scenario::General),
            "daily_activities" => Ok(Scenario::DailyActivities),
            "city_walking" => Ok(Scenario::CityWalking),
            "traffic" => Ok(Scenario::Traffic),
            "wildlife" => Ok(Scenario::Wildlife),
            other => Err(PromptError::Unknown(other.to_string())),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.template_name().trim_start_matches("describe_"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    templates: BTreeMap<String, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self { templates: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    /// Built-ins overridden by every `*.txt` file in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let io = |source| PromptError::Io { path: dir.display().to_string(), source };
        let mut set = Self::builtin();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let body = std::fs::read_to_string(&path).map_err(io)?;
            set.templates.insert(name.to_string(), body);
        }
        Ok(set)
    }

    pub fn set(&mut self, name: impl Into<String>, template: impl Into<String>) {
        self.templates.insert(name.into(), template.into());
    }

    pub fn get(&self, name: &str) -> Result<&str, PromptError> {
        self.templates.get(name).map(String::as_str).ok_or_else(|| PromptError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        Ok(render(self.get(name)?, vars))
    }
}

pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}
