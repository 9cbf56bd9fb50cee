//! Flat `key = value` configuration text, plus JSON.
//!
//! Nested structures use dotted keys (`world.len_correct = 8`). Values are read
//! as JSON scalars when they parse as one and as bare strings otherwise, so
//! `kl_sign_convention = appendix_c` and `kl_sign_convention = "appendix_c"`
//! are equivalent. `#` starts a comment line.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Renders any serializable struct as `key = value` lines, sorted by key.
pub fn to_kv_string<C: Serialize>(config: &C) -> Result<String> {
    let value = serde_json::to_value(config).map_err(|e| parse_err("config", e.to_string()))?;
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    lines.sort();
    let mut out = String::new();
    for (k, v) in lines {
        out.push_str(&k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    Ok(out)
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        Value::String(s) if needs_quotes(s) => {
            out.push((prefix.to_string(), Value::String(s.clone()).to_string()))
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// A bare string must not be mistaken for another JSON value on re-read.
fn needs_quotes(s: &str) -> bool {
    s.is_empty() || s.trim() != s || s.starts_with('#') || serde_json::from_str::<Value>(s).is_ok()
}

/// Parses `key = value` text into a JSON object with nested dotted keys.
pub fn parse_kv(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let (key, val) = line
            .split_once('=')
            .ok_or_else(|| parse_err(&loc, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(parse_err(&loc, "empty key"));
        }
        let val = val.trim();
        let value =
            serde_json::from_str::<Value>(val).unwrap_or_else(|_| Value::String(val.to_string()));
        insert_dotted(&mut root, key, value).map_err(|m| parse_err(&loc, m))?;
    }
    Ok(Value::Object(root))
}

fn insert_dotted(
    root: &mut Map<String, Value>,
    key: &str,
    value: Value,
) -> std::result::Result<(), String> {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(format!("malformed key {key:?}"));
        }
        if parts.peek().is_none() {
            if node.insert(part.to_string(), value).is_some() {
                return Err(format!("duplicate key {key:?}"));
            }
            return Ok(());
        }
        let child = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        node = child
            .as_object_mut()
            .ok_or_else(|| format!("key {key:?} nests under a scalar"))?;
    }
    Ok(())
}

fn parse_value(text: &str) -> Result<Value> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str::<Value>(text).map_err(|e| {
            parse_err(
                format!("line {}, column {}", e.line(), e.column()),
                e.to_string(),
            )
        })
    } else {
        parse_kv(text)
    }
}

fn deserialize<C: DeserializeOwned>(value: Value) -> Result<C> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        parse_err(format!("field `{path}`"), e.into_inner().to_string())
    })
}

/// Parses a config from either JSON or `key = value` text.
pub fn from_config_str<C: DeserializeOwned>(text: &str) -> Result<C> {
    deserialize(parse_value(text)?)
}

/// Like [`from_config_str`], but keys absent from `text` keep their value in
/// `base`, at any depth.
pub fn from_config_str_over<C: Serialize + DeserializeOwned>(text: &str, base: &C) -> Result<C> {
    let mut merged = serde_json::to_value(base).map_err(|e| parse_err("config", e.to_string()))?;
    merge(&mut merged, parse_value(text)?);
    deserialize(merged)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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
