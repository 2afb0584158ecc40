//! Config files and flag overlay.
//!
//! Each subcommand's argument struct doubles as its config schema. A config
//! file (JSON, or TOML by extension) supplies a base object; flags given on
//! the command line replace whole top-level keys. Unknown keys are rejected.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, path: Option<&Path>) -> Result<T> {
    let mut base = match path {
        Some(p) => load(p)?,
        None => Map::new(),
    };
    let Value::Object(over) = serde_json::to_value(flags)? else {
        unreachable!("argument structs serialize to objects");
    };
    base.extend(over);
    let label = path.map_or_else(|| "flags".to_string(), |p| p.display().to_string());
    serde_json::from_value(Value::Object(base)).with_context(|| format!("invalid configuration in {label}"))
}

fn load(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))?
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => anyhow::bail!("config {} must be a table/object", path.display()),
    }
}

/// Keys naming where results go; they do not change the results.
const OUTPUT_KEYS: [&str; 2] = ["out", "out_dir"];

/// SHA-256 of the resolved configuration's JSON encoding, output locations
/// excluded.
pub fn hash<T: Serialize>(config: &T) -> Result<String> {
    let mut value = serde_json::to_value(config)?;
    if let Value::Object(m) = &mut value {
        OUTPUT_KEYS.iter().for_each(|k| {
            m.remove(*k);
        });
    }
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}
