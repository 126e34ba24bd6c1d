//! JSON run configuration with dotted-path overrides.

use std::fs;
use std::path::Path;

use lmcl_core::train::TrainConfig;
use serde_json::Value;

use crate::error::{LmclError, Result};

/// Reads a config file; missing keys take their defaults, unknown keys are rejected.
pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| LmclError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LmclError::Config(format!("{}: {e}", path.display())))
}

/// Parses the right-hand side of `key=value`: JSON when it parses, a string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to `root`; every path segment must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LmclError::Config(format!("override `{assignment}` is not key=value")))?;
    let mut node = root;
    let mut seen = Vec::new();
    for seg in path.split('.') {
        seen.push(seg);
        node = match node {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| LmclError::Config(format!("override names unknown key `{}`", seen.join("."))))?;
    }
    *node = parse_value(raw);
    Ok(())
}

/// File (or defaults) plus overrides, validated.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => load(p)?,
        None => TrainConfig::default(),
    };
    let mut value = serde_json::to_value(&base).map_err(|e| LmclError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| LmclError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_json(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

pub fn save(cfg: &TrainConfig, path: &Path) -> Result<()> {
    fs::write(path, to_json(cfg) + "\n").map_err(|e| LmclError::io(path, e))
}
