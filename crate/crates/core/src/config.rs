//! Run configuration: a TOML file plus `key=value` overrides, validated as a whole.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{GeneratorConfig, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::classifiers::EnsembleParams;
use crate::inference::MergeThresholds;
use crate::pipeline::EvalSettings;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Coco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directories for the `coco` source (`images/`, `panoptic/`, `annotations.json`).
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub eval_split: Split,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_path: None,
            eval_path: None,
            train_count: 512,
            eval_count: 128,
            seed: 0,
            eval_split: Split::Eval,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub seed: u64,
    /// One template per line, each with a single `{}`; built-in templates when unset.
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ensemble: EnsembleParams,
    pub thresholds: MergeThresholds,
    pub batch_size: usize,
    /// Shorter side of images at prediction time.
    pub test_size: usize,
    /// Longer-side cap at prediction time.
    pub max_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleParams::default(),
            thresholds: MergeThresholds::default(),
            batch_size: 16,
            test_size: 64,
            max_size: 1344,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub text: TextConfig,
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            ensemble: self.ensemble,
            thresholds: self.thresholds,
        }
    }
}

/// Where the resolved configuration came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub file: Option<PathBuf>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub config: RunConfig,
    pub provenance: Provenance,
}

pub const SNAPSHOT_FILE: &str = "run_config.json";

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        let e = &self.eval.ensemble;
        if let Err(err) = EnsembleParams::new(e.alpha(), e.beta(), e.method()) {
            return Err(Error::config("eval.ensemble", err.to_string()));
        }
        let t = &self.eval.thresholds;
        if !(0.0..=1.0).contains(&t.object) {
            return Err(Error::config("eval.thresholds.object", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&t.overlap) {
            return Err(Error::config("eval.thresholds.overlap", "must lie in [0, 1]"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        if self.eval.test_size == 0 || !self.eval.test_size.is_multiple_of(32) {
            return Err(Error::config("eval.test_size", "must be a positive multiple of 32"));
        }
        if self.eval.max_size < self.eval.test_size {
            return Err(Error::config("eval.max_size", "must be at least eval.test_size"));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.train_count == 0 {
                    return Err(Error::config("data.train_count", "must be positive"));
                }
                if self.data.eval_count == 0 {
                    return Err(Error::config("data.eval_count", "must be positive"));
                }
            }
            DataSource::Coco => {
                if self.data.train_path.is_none() {
                    return Err(Error::config("data.train_path", "required when data.source = \"coco\""));
                }
                if self.data.eval_path.is_none() {
                    return Err(Error::config("data.eval_path", "required when data.source = \"coco\""));
                }
            }
        }
        if let Some(p) = &self.text.templates {
            if !p.exists() {
                return Err(Error::config("text.templates", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{seg}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Shorthand flags that expand into overrides.
pub fn frozen_override(frozen: bool) -> String {
    let preset = if frozen { "frozen/frozen/frozen" } else { "trainable/trainable/trainable" };
    format!("model.preset=\"{preset}\"")
}

fn deserialize(table: toml::Table) -> Result<RunConfig> {
    RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| {
        let msg = e.to_string();
        Error::config(field_hint(&msg), msg.trim().to_string())
    })
}

fn field_hint(msg: &str) -> String {
    // toml reports e.g. "unknown field `foo`" or "invalid type ... for key `train.lr`"
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

/// Resolves `base` (file contents or an existing snapshot) plus overrides, then validates.
pub fn resolve(base: toml::Table, file: Option<&Path>, overrides: &[String]) -> Result<ConfigSnapshot> {
    let mut table = base;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config = deserialize(table)?;
    config.validate()?;
    Ok(ConfigSnapshot {
        config,
        provenance: Provenance {
            file: file.map(Path::to_path_buf),
            overrides: overrides.to_vec(),
        },
    })
}

pub fn load_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))
}

/// TOML form of a configuration, usable as a base for further overrides.
pub fn to_table(config: &RunConfig) -> Result<toml::Table> {
    let text = toml::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    text.parse::<toml::Table>().map_err(|e| Error::Format(e.to_string()))
}

pub fn write_snapshot(dir: &Path, snap: &ConfigSnapshot) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SNAPSHOT_FILE), serde_json::to_string_pretty(snap)?)?;
    Ok(())
}

pub fn read_snapshot(dir: &Path) -> Result<Option<ConfigSnapshot>> {
    let p = dir.join(SNAPSHOT_FILE);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
}
