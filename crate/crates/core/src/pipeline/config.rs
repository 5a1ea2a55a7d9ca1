use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendSpecs;
use crate::rpo::{RpoConfig, RpoError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected dotted.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Call the configured backends directly.
    #[default]
    Live,
    /// Call the configured backends and write every exchange to a cassette.
    Record,
    /// Serve every call from a cassette; no backend is contacted.
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            _ => Err(format!("unknown mode {s:?} (expected live, record or replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Directory holding one `<sequence>.json` cassette per sequence.
    pub cassette_dir: Option<PathBuf>,
    /// Scale applied to boxes before cropping patches for verification.
    pub context_factor: f64,
    /// Write per-frame score tables to `scores.jsonl`.
    pub emit_scores: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { mode: Mode::Live, cassette_dir: None, context_factor: 1.0, emit_scores: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub rpo: RpoConfig,
    pub backends: BackendSpecs,
    pub pipeline: PipelineConfig,
}

/// Sets `path` (dot-separated) in `root`, creating tables on the way.
fn set_dotted(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), ConfigError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.trim().is_empty()) {
        return Err(ConfigError::Override(path.to_string()));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut table = root;
    for key in parents {
        let entry = table.entry(key.trim().to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Invalid(format!("{key} in {path} is not a table")))?;
    }
    table.insert(last.trim().to_string(), value);
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, or as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl EngineConfig {
    /// Parses TOML text, applies `key=value` overrides on top, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: EngineConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when absent); a relative cassette directory is
    /// taken relative to the config file.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let Some(path) = path else { return Self::from_toml_str("", overrides) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = &cfg.pipeline.cassette_dir {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.pipeline.cassette_dir = Some(base.join(dir));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rpo.validate().map_err(|e| match e {
            RpoError::InvalidConfig(m) => ConfigError::Invalid(format!("rpo: {m}")),
            other => ConfigError::Invalid(other.to_string()),
        })?;
        let cf = self.pipeline.context_factor;
        if !(cf.is_finite() && cf >= 1.0) {
            return Err(ConfigError::Invalid(format!("pipeline.context_factor must be >= 1, got {cf}")));
        }
        match self.pipeline.mode {
            Mode::Live | Mode::Record if !self.backends.is_complete() => Err(ConfigError::Invalid(format!(
                "{} mode needs [backends.mllm], [backends.grounder], [backends.tracker] and [backends.embedder]",
                if self.pipeline.mode == Mode::Live { "live" } else { "record" }
            ))),
            Mode::Record | Mode::Replay if self.pipeline.cassette_dir.is_none() => {
                Err(ConfigError::Invalid("record and replay modes need pipeline.cassette_dir".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn cassette_path(&self, sequence: &str) -> Option<PathBuf> {
        self.pipeline.cassette_dir.as_ref().map(|d| d.join(format!("{sequence}.json")))
    }
}
