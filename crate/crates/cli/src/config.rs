//! Run configuration: an optional TOML/JSON file overlaid with command-line
//! flags. Keys are the snake_case field names; flags use the same names in
//! kebab-case and always win over the file.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cir_core::analysis::SimilarityStudy;
use cir_core::combiner::CombineMode;
use cir_core::preprocess::{Interpolation, PreprocessConfig, DEFAULT_TARGET_RATIO};
use cir_core::retrieval::{EvalOptions, Protocol};
use cir_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// `None` lets the command choose (checkpoint mode, or `full` for training).
    pub mode: Option<CombineMode>,
    pub protocol: Protocol,
    /// `None` keeps the protocol default (on for CIRR, off otherwise).
    pub exclude_reference: Option<bool>,
    pub target_ratio: f64,
    pub dim: usize,
    pub interpolation: Interpolation,
    pub sample_pairs: usize,
    pub nontargets_per_query: usize,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let study = SimilarityStudy::default();
        let pre = PreprocessConfig::default();
        Self {
            train: TrainConfig::default(),
            mode: None,
            protocol: Protocol::Generic,
            exclude_reference: None,
            target_ratio: DEFAULT_TARGET_RATIO,
            dim: pre.dim,
            interpolation: pre.interpolation,
            sample_pairs: study.sample_pairs,
            nontargets_per_query: study.nontargets_per_query,
            bins: study.bins,
        }
    }
}

impl RunConfig {
    /// Reads `file` (if any), applies `overrides` on top and validates.
    pub fn load(file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self> {
        let mut merged = match file {
            Some(path) => read_config_file(path)?,
            None => Map::new(),
        };
        merged.extend(overrides);
        check_keys(&merged)?;
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
        cfg.train
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        cfg.preprocess()
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        cfg.study()
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            protocol: self.protocol,
            exclude_reference: self.exclude_reference,
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_ratio: self.target_ratio,
            dim: self.dim,
            interpolation: self.interpolation,
        }
    }

    pub fn study(&self) -> SimilarityStudy {
        SimilarityStudy {
            sample_pairs: self.sample_pairs,
            nontargets_per_query: self.nontargets_per_query,
            seed: self.train.seed,
            bins: self.bins,
        }
    }
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
            serde_json::to_value(table).context("converting TOML config")?
        }
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?,
        _ => bail!(UsageError(format!(
            "config file {} must end in .toml or .json",
            path.display()
        ))),
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => bail!(UsageError(format!(
            "config file {} must hold a table",
            path.display()
        ))),
    }
}

fn check_keys(map: &Map<String, Value>) -> Result<()> {
    let known: BTreeSet<String> = match serde_json::to_value(RunConfig::default())? {
        Value::Object(m) => m.into_iter().map(|(k, _)| k).collect(),
        _ => unreachable!("RunConfig serializes to an object"),
    };
    let unknown: Vec<&str> = map
        .keys()
        .filter(|k| !known.contains(k.as_str()))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        bail!(UsageError(format!(
            "unknown configuration keys: {}",
            unknown.join(", ")
        )));
    }
    Ok(())
}

/// Collects `Some` flag values under their config key.
#[derive(Debug, Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(
                key.to_string(),
                serde_json::to_value(v).expect("flag values serialize"),
            );
        }
        self
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}
