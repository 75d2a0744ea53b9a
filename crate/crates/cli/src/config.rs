//! Experiment config: a TOML document whose top level is a [`TrainConfig`]
//! plus a `[run]` table for output and seed-list settings.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use selfreg::trainer::TrainConfig;
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    /// Seeds for multi-seed commands; each entry seeds data, init and train.
    pub seed_list: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: None,
            seed_list: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub run: RunConfig,
}

#[derive(Debug, PartialEq)]
pub enum ConfigError {
    Read { path: PathBuf, reason: String },
    Syntax(String),
    Override { arg: String, reason: String },
    Field { path: String, reason: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, reason } => write!(f, "cannot read config {}: {reason}", path.display()),
            ConfigError::Syntax(reason) => write!(f, "config is not valid TOML: {reason}"),
            ConfigError::Override { arg, reason } => write!(f, "bad override `{arg}`: {reason}"),
            ConfigError::Field { path, reason } => write!(f, "config field `{path}`: {reason}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    /// Dotted path of the offending field, when there is one.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            ConfigError::Field { path, .. } => Some(path),
            _ => None,
        }
    }
}

/// Applies `key.path=value`. The value is parsed as a TOML literal and falls
/// back to a bare string, so `protocol=single-source` works unquoted.
pub fn apply_override(doc: &mut Table, arg: &str) -> Result<(), ConfigError> {
    let bad = |reason: &str| ConfigError::Override {
        arg: arg.to_string(),
        reason: reason.to_string(),
    };
    let (key, raw) = arg.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let keys: Vec<&str> = key.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => Value::String(raw.to_string()),
    };

    let (last, parents) = keys.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for (i, k) in parents.iter().enumerate() {
        let slot = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = slot.as_table_mut().ok_or_else(|| ConfigError::Field {
            path: keys[..=i].join("."),
            reason: "is not a table".into(),
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Builds a validated config from an optional file plus overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| ConfigError::Read {
            path: p.to_path_buf(),
            reason: e.to_string(),
        })?,
        None => String::new(),
    };
    parse_str(&text, overrides)
}

pub fn parse_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    for arg in overrides {
        apply_override(&mut doc, arg)?;
    }
    let run = match doc.remove("run") {
        Some(v) => typed::<RunConfig>(v, "run")?,
        None => RunConfig::default(),
    };
    let train = typed::<TrainConfig>(Value::Table(doc), "")?;
    let cfg = ExperimentConfig { train, run };
    cfg.validate()?;
    Ok(cfg)
}

fn typed<T: serde::de::DeserializeOwned>(value: Value, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner == ".") {
            (true, _) => inner,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix}.{inner}"),
        };
        ConfigError::Field {
            path,
            reason: e.into_inner().to_string(),
        }
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| match e {
            selfreg::Error::Config { field, reason } => ConfigError::Field { path: field, reason },
            other => ConfigError::Field {
                path: String::new(),
                reason: other.to_string(),
            },
        })?;
        if self.run.seed_list.is_empty() {
            return Err(ConfigError::Field {
                path: "run.seed_list".into(),
                reason: "needs at least one seed".into(),
            });
        }
        Ok(())
    }

    /// Canonical TOML form; re-parses to an equal config.
    pub fn to_toml(&self) -> String {
        let mut doc = Table::try_from(&self.train).expect("train config serializes");
        doc.insert(
            "run".into(),
            Value::Table(Table::try_from(&self.run).expect("run config serializes")),
        );
        toml::to_string_pretty(&doc).expect("table serializes")
    }
}
