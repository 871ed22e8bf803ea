//! Experiment config files and `key=value` overrides.

use std::fs;
use std::path::Path;

use lunit::experiment::ExperimentConfig;
use lunit::networks::Task;

use crate::error::CliError;

/// Sections searched, in order, for a bare `key=value` override.
const SECTIONS: [&[&str]; 4] = [&["network"], &["train"], &["train", "augment"], &["data"]];

pub fn load(path: Option<&Path>, task: Task) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(lunit::Error::from)?;
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", p.display(), e.message())))
        }
        None => Ok(ExperimentConfig::for_task(task)),
    }
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::config(e.to_string()))
}

fn table_at<'a>(root: &'a mut toml::Table, path: &[&str]) -> Option<&'a mut toml::Table> {
    let mut t = root;
    for seg in path {
        t = t.get_mut(*seg)?.as_table_mut()?;
    }
    Some(t)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key=value` or `section.key=value` overrides; keys must already exist.
pub fn apply_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root: toml::Table = toml::Value::try_from(cfg)
        .ok()
        .and_then(|v| v.as_table().cloned())
        .ok_or_else(|| CliError::config("config does not serialize to a table"))?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override {ov:?} is not key=value")))?;
        let key = key.trim();
        let parts: Vec<&str> = key.split('.').collect();
        let (section, name): (Vec<&str>, &str) = if parts.len() > 1 {
            (parts[..parts.len() - 1].to_vec(), parts[parts.len() - 1])
        } else {
            let hits: Vec<&[&str]> = SECTIONS
                .iter()
                .copied()
                .filter(|s| {
                    let mut copy = root.clone();
                    table_at(&mut copy, s).is_some_and(|t| t.contains_key(key) && !t[key].is_table())
                })
                .collect();
            match hits.as_slice() {
                [one] => (one.to_vec(), key),
                [] => return Err(CliError::config(format!("unknown config key {key}"))),
                many => {
                    let names: Vec<String> = many.iter().map(|s| format!("{}.{key}", s.join("."))).collect();
                    return Err(CliError::config(format!(
                        "ambiguous config key {key}; use one of {}",
                        names.join(", ")
                    )));
                }
            }
        };
        let table = table_at(&mut root, &section)
            .filter(|t| t.contains_key(name))
            .ok_or_else(|| CliError::config(format!("unknown config key {key}")))?;
        table.insert(name.to_string(), parse_value(raw.trim()));
    }
    toml::Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))
}
