//! Run directories and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lunit::experiment::ExperimentConfig;
use lunit::training::MetricReport;
use serde::Serialize;

use crate::error::CliError;

/// Creates `dir`, refusing to reuse one that already has contents.
pub fn prepare_dir(dir: &Path) -> Result<PathBuf, CliError> {
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir)?.next().is_none();
        if !empty {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

/// Refuses to replace an existing file.
pub fn fresh_file(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        return Err(CliError::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: Option<u64>,
    pub threads: usize,
    pub args: Vec<String>,
    pub info: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<&'a ExperimentConfig>,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, config: Option<&'a ExperimentConfig>, threads: usize) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.map(|c| c.train.seed),
            threads,
            args: std::env::args().collect(),
            info: BTreeMap::new(),
            config,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.info.insert(key.to_string(), value.to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// Two-column metric table with a fixed row order.
pub fn metric_table(r: &MetricReport) -> String {
    let mut rows = vec![
        ("oa".to_string(), r.oa),
        ("ma".to_string(), r.ma),
        ("miou".to_string(), r.miou),
    ];
    if let Some(v) = r.imiou {
        rows.push(("imiou".into(), v));
    }
    if let Some(v) = r.cmiou {
        rows.push(("cmiou".into(), v));
    }
    for (i, v) in r.per_class_iou.iter().enumerate() {
        rows.push((format!("iou[{i}]"), *v));
    }
    let mut out = String::from("metric\tvalue\n");
    for (k, v) in rows {
        out.push_str(&format!("{k}\t{v:.6}\n"));
    }
    out
}
