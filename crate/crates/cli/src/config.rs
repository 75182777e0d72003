//! JSON configuration files with `--set key=value` overrides.
//!
//! Missing keys take their defaults, unknown keys are rejected, and the
//! fully resolved configuration is written next to each command's outputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Parses the override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c` inside `root`, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    match node {
        Value::Object(map) => {
            map.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(CliError::config(format!("`{key}` does not name a nested field"))),
    }
}

pub fn load<T: DeserializeOwned>(file: Option<&Path>, sets: &[String]) -> CliResult<T> {
    let mut value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !value.is_object() {
        return Err(CliError::config("configuration must be a JSON object"));
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{s}` is not of the form key=value")))?;
        set_path(&mut value, key.trim(), parse_value(raw))?;
    }
    serde_json::from_value(value).map_err(|e| CliError::config(e.to_string()))
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// `model.ckpt` -> `model.config.json`.
pub fn config_path_for(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.config.json"))
}

pub fn write_resolved<T: Serialize>(path: &Path, config: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_pretty_json(config)?)?;
    Ok(())
}

pub fn require_path(path: &Path, name: &str) -> CliResult<()> {
    if path.as_os_str().is_empty() {
        Err(CliError::config(format!("`{name}` is required")))
    } else {
        Ok(())
    }
}
