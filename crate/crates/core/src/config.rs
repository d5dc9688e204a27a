//! Run configuration: flat `key = value` files with dotted section keys,
//! validated against the tree of default values.
//!
//! ```text
//! # comments start with '#'
//! method = simple
//! loss.r = 3
//! encoder.hidden = [64, 64]
//! data.noise_scale = 1.0
//! ```
//!
//! Values are JSON literals; anything that does not parse as JSON is taken
//! as a bare string. A JSON document (for instance a previous run's
//! `manifest.json`) is accepted as well.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::data::GenSpec;
use crate::trainer::{AblationGrid, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Where the dataset comes from: a CSV file when `path` is set, otherwise
/// generated from the embedded spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub spec: GenSpec,
    pub path: Option<String>,
}

/// Artifacts consumed by `eval` and `plot-roc`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputConfig {
    pub checkpoint: Option<String>,
    pub reports: Vec<String>,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: AblationGrid,
    pub input: InputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            ablation: AblationGrid {
                r: vec![1.0, 2.0, 3.0],
                alpha: vec![0.0002, 0.0005, 0.001, 0.002],
                b_theta: vec![0.3],
            },
            input: InputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate()?;
        self.data.spec.validate().map_err(|e| ConfigError::Value(e.to_string()))?;
        let g = &self.ablation;
        if g.r.is_empty() || g.alpha.is_empty() || g.b_theta.is_empty() {
            return Err(ConfigError::Value("ablation grid axes must be non-empty".into()));
        }
        if !self.input.names.is_empty() && self.input.names.len() != self.input.reports.len() {
            return Err(ConfigError::Value(format!(
                "input.names has {} entries for {} reports",
                self.input.names.len(),
                self.input.reports.len()
            )));
        }
        Ok(())
    }

    /// Every dotted key the schema accepts, in document order.
    pub fn schema_keys() -> Vec<String> {
        let mut out = Vec::new();
        collect_keys(&RunConfig::default().to_value(), "", &mut out);
        out
    }

    /// Renders the config back into the flat text format.
    pub fn to_flat_text(&self) -> String {
        let mut lines = Vec::new();
        flatten(&self.to_value(), "", &mut lines);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                collect_keys(child, &join(prefix, k), out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(child, &join(prefix, k), out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

fn join(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_string()
    } else {
        format!("{prefix}.{k}")
    }
}

/// Places `value` at a dotted path that must already exist in `tree`.
fn set_path(tree: &mut Value, prefix: &str, key: &str, value: Value) -> Result<(), ConfigError> {
    let full = join(prefix, key);
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| ConfigError::UnknownKey(full.clone()))?;
        let child = map.get_mut(*part).ok_or_else(|| ConfigError::UnknownKey(full.clone()))?;
        if i + 1 == parts.len() {
            if child.is_object() && !value.is_object() {
                return Err(ConfigError::Value(format!("`{full}` is a section, not a value")));
            }
            if child.is_object() {
                return merge(child, &value, &full);
            }
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split yields at least one part")
}

fn merge(base: &mut Value, overlay: &Value, prefix: &str) -> Result<(), ConfigError> {
    let Value::Object(over) = overlay else {
        return Err(ConfigError::Value(format!("`{prefix}` must be an object")));
    };
    for (k, v) in over {
        set_path(base, prefix, k, v.clone())?;
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn finish(tree: Value) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| ConfigError::Value(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses the flat text format on top of the defaults.
pub fn parse_flat(text: &str) -> Result<RunConfig, ConfigError> {
    let mut tree = RunConfig::default().to_value();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, msg: "expected `key = value`".into() });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, msg: "empty key or value".into() });
        }
        if !seen.insert(k.to_string()) {
            return Err(ConfigError::Duplicate(k.to_string()));
        }
        set_path(&mut tree, "", k, parse_value(v))?;
    }
    finish(tree)
}

/// Parses a JSON config. A manifest (an object with a `config` member) is
/// unwrapped first.
pub fn parse_json(text: &str) -> Result<RunConfig, ConfigError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let body = match doc {
        Value::Object(mut m) if m.contains_key("config") && m.contains_key("command") => {
            m.remove("config").unwrap_or(Value::Object(Map::new()))
        }
        other => other,
    };
    let mut tree = RunConfig::default().to_value();
    merge(&mut tree, &body, "")?;
    finish(tree)
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    if text.trim_start().starts_with('{') {
        parse_json(text)
    } else {
        parse_flat(text)
    }
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse(&text)
}
