//! Run configuration: a TOML file with `net.*`, `train.*`, `data.*` and
//! `run.*` keys, written either as tables or as dotted keys, followed by
//! `key=value` overrides applied in order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_split: String,
    /// Empty disables validation.
    pub val_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    /// Adds the `wall_ms` column to the metrics log.
    pub log_wall_time: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            log_wall_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run: RunSection,
}

fn flatten(prefix: &str, t: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(sub) => flatten(&key, sub, out),
            _ => out.push((key, v.clone())),
        }
    }
}

fn to_table<S: Serialize>(v: &S) -> Result<Table> {
    let text = toml::to_string(v).map_err(|e| Error::Config(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

fn set(t: &mut Table, key: &str, v: Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let sub = t.entry(head).or_insert_with(|| Value::Table(Table::new()));
            if let Value::Table(sub) = sub {
                set(sub, rest, v);
            }
        }
        None => {
            t.insert(key.to_string(), v);
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Every accepted dotted key, sorted.
    pub fn valid_keys() -> Vec<String> {
        let mut out = Vec::new();
        flatten("", &to_table(&Self::default()).expect("default config serializes"), &mut out);
        let mut keys: Vec<String> = out.into_iter().map(|(k, _)| k).collect();
        keys.sort();
        keys
    }

    fn unknown_key(key: &str, valid: &[String]) -> Error {
        Error::Config(format!("unknown config key `{key}`; valid keys are:\n  {}", valid.join("\n  ")))
    }

    /// Resolves a full dotted key or a leaf name that matches exactly one key.
    pub fn resolve_key(key: &str) -> Result<String> {
        let valid = Self::valid_keys();
        if valid.iter().any(|k| k == key) {
            return Ok(key.to_string());
        }
        let suffix = format!(".{key}");
        let hits: Vec<&String> = valid.iter().filter(|k| k.ends_with(&suffix)).collect();
        match hits.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err(Self::unknown_key(key, &valid)),
            many => Err(Error::Config(format!(
                "ambiguous config key `{key}`: matches {}",
                many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// Builds a configuration from optional file text plus `key=value`
    /// overrides (later overrides win).
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let valid = Self::valid_keys();
        let mut table = match text {
            Some(s) => toml::from_str::<Table>(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?,
            None => Table::new(),
        };
        let mut present = Vec::new();
        flatten("", &table, &mut present);
        if let Some((k, _)) = present.iter().find(|(k, _)| !valid.contains(k)) {
            return Err(Self::unknown_key(k, &valid));
        }
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form key=value")))?;
            set(&mut table, &Self::resolve_key(k.trim())?, parse_value(v));
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
