//! Config file loading and `--set` overrides.

use anyhow::{Context, Result};
use finenet_core::Error;
use finenet_train::RunConfig;
use toml::{Table, Value};

use crate::args::Global;

/// Parses `v` as a TOML value, falling back to a bare string.
fn parse_value(v: &str) -> Value {
    format!("v = {v}").parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(v.to_string()))
}

/// Sets the dotted `key` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), Error> {
    let (key, value) = spec.split_once('=').ok_or_else(|| Error::config(format!("override {spec:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| Error::config(format!("override key {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
pub fn resolve(global: &Global) -> Result<RunConfig> {
    let mut table = match &global.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            text.parse::<Table>().map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for spec in &global.overrides {
        apply_override(&mut table, spec)?;
    }
    if let Some(seed) = global.seed {
        apply_override(&mut table, &format!("data.seed={seed}"))?;
        apply_override(&mut table, &format!("train.seed={seed}"))?;
    }
    let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_build_nested_tables() {
        let mut t = Table::new();
        apply_override(&mut t, "train.steps=7").unwrap();
        apply_override(&mut t, "model.enhance.offsets=plain").unwrap();
        apply_override(&mut t, "train.lr = 0.5").unwrap();
        assert_eq!(t["train"]["steps"].as_integer(), Some(7));
        assert_eq!(t["train"]["lr"].as_float(), Some(0.5));
        assert_eq!(t["model"]["enhance"]["offsets"].as_str(), Some("plain"));
        assert!(apply_override(&mut t, "train.steps").is_err());
        assert!(apply_override(&mut t, "train..x=1").is_err());
    }
}
