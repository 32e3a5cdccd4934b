//! Run configuration: one JSON document, a training preset underneath it
//! and flat dotted-key overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use trajq_core::encoder::EncoderConfig;
use trajq_core::reward::ShapingConfig;
use trajq_core::trainer::TrainConfig;

use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReorderConfig {
    pub enabled: bool,
    /// CoNLL-U parses of the game masters.
    pub parses: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub game: PathBuf,
    /// Training schedule the `train` object is laid over.
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub shaping: ShapingConfig,
    #[serde(default)]
    pub reorder: ReorderConfig,
    pub output_dir: PathBuf,
}

fn default_preset() -> String {
    "full_game".into()
}

/// Parse `key=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_override(raw: &str) -> Result<(String, Value), UsageError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override {raw:?} is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(UsageError(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Set a dotted path inside `doc`, creating objects on the way.
pub fn apply_override(doc: &mut Value, key: &str, value: Value) -> Result<(), UsageError> {
    let mut cur = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| UsageError(format!("override {key:?}: {part:?} is inside a non-object")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Resolve a raw document: overrides first, then the preset fills every
    /// training field the document leaves out.
    pub fn from_value(mut doc: Value, overrides: &[(String, Value)]) -> Result<Self, UsageError> {
        if !doc.is_object() {
            return Err(UsageError("run config must be a JSON object".into()));
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v.clone())?;
        }
        let preset = doc.get("preset").and_then(Value::as_str).unwrap_or("full_game").to_string();
        let base = TrainConfig::preset(&preset).ok_or_else(|| UsageError(format!("unknown preset {preset:?}")))?;
        let mut train = serde_json::to_value(base).expect("config serializes");
        if let Some(user) = doc.get_mut("train").map(Value::take) {
            merge(&mut train, user);
        }
        doc["train"] = train;
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| UsageError(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self, UsageError> {
        let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| UsageError(format!("config {} is not JSON: {e}", path.display())))?;
        Self::from_value(doc, overrides)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        self.train.validate().map_err(|e| UsageError(e.to_string()))?;
        self.encoder.validate().map_err(|e| UsageError(e.to_string()))?;
        self.shaping.validate().map_err(|e| UsageError(e.to_string()))?;
        if !self.game.is_file() {
            return Err(UsageError(format!("game file {} does not exist", self.game.display())));
        }
        if self.reorder.enabled {
            match &self.reorder.parses {
                None => return Err(UsageError("reorder.enabled needs reorder.parses".into())),
                Some(p) if !p.is_file() => {
                    return Err(UsageError(format!("parse file {} does not exist", p.display())));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}
