//! Layered run configuration: preset, then TOML file, then `key.path=value` overrides.

use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Named starting points for a configuration.
pub fn preset(name: &str) -> Result<TrainConfig> {
    match name {
        "smoke" => Ok(TrainConfig::smoke()),
        "reference" => Ok(TrainConfig::reference()),
        other => Err(Error::Config(format!("unknown preset {other:?}; known: smoke, reference"))),
    }
}

fn to_table(cfg: &TrainConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| Error::Config(format!("serialising config: {e}")))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override. Anything that is not a TOML literal is a string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies one `a.b.c=value` override to a table.
fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} must have the form key.path=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let mut node = table;
    for seg in &path[..path.len() - 1] {
        node = match node.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {spec:?}: {seg} is not a section"))),
        };
    }
    node.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Builds a configuration from a preset, an optional TOML document and overrides, in
/// increasing order of precedence, then validates it.
pub fn resolve(preset_name: &str, file_text: Option<&str>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table = to_table(&preset(preset_name)?)?;
    if let Some(text) = file_text {
        let file: Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        merge(&mut table, file);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: TrainConfig = Value::Table(table).try_into().map_err(|e| Error::Config(format!("{e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the file layer from TOML, or from JSON holding either a configuration or a run
/// manifest with a `config` field.
pub fn load(preset_name: &str, path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let Some(path) = path else {
        return resolve(preset_name, None, overrides);
    };
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let mut v: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        let table = Table::try_from(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let toml_text = toml::to_string(&table).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        return resolve(preset_name, Some(&toml_text), overrides);
    }
    resolve(preset_name, Some(&text), overrides)
}

pub fn to_toml(cfg: &TrainConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("serialising config: {e}")))
}
