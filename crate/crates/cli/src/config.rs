//! Layered configuration: serialized defaults, then an optional TOML file,
//! then `key=value` overrides with dotted keys for nested tables.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// One `--set key=value` flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

/// Parses `a.b=value`; the value is read as a TOML literal when it is one
/// and as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<Override, String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("bad key in {s:?}"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok(Override { key: key.to_owned(), value })
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn set(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut t = table;
    for p in parts {
        t = match t.entry(p).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(inner) => inner,
            _ => bail!("{key}: {p} is not a table"),
        };
    }
    t.insert(last.to_owned(), value);
    Ok(())
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Defaults overlaid with the file and the overrides, as a table.
pub fn layered<T: Serialize>(defaults: &T, file: Option<&Path>, overrides: &[Override]) -> Result<Table> {
    let mut table = Table::try_from(defaults).context("serializing defaults")?;
    if let Some(f) = file {
        merge(&mut table, read_table(f)?);
    }
    for o in overrides {
        set(&mut table, &o.key, o.value.clone())?;
    }
    Ok(table)
}

pub fn decode<T: DeserializeOwned>(table: Table, what: &str) -> Result<T> {
    table.try_into().map_err(|e: toml::de::Error| anyhow!("invalid {what} config: {}", e.message()))
}

/// Removes a path-valued key that sits beside the typed fields.
pub fn take_path(table: &mut Table, key: &str) -> Result<Option<PathBuf>> {
    match table.remove(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
        Some(other) => bail!("{key} must be a path string, got {other}"),
    }
}
