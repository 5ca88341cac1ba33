//! Run configuration: one TOML file whose keys may be written as nested
//! tables or flat dotted keys, plus `key=value` overrides.
//!
//! Values are merged over the defaults key by key, so a partial file only
//! changes what it names. Keys that do not exist in the defaults are
//! rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::attention::AttentionConfig;
use crate::corpus::SynthesisConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    UnknownKey(String),
    BadOverride(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(m) => write!(f, "config: {m}"),
            Self::Parse(m) => write!(f, "config: {m}"),
            Self::UnknownKey(k) => write!(f, "config: unknown key `{k}`"),
            Self::BadOverride(s) => write!(f, "config: override `{s}` is not key=value"),
            Self::Invalid(m) => write!(f, "config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Settings of instruction tuning and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructSection {
    pub train: TrainConfig,
    /// Longest prompt+response sequence; prompts are cut from the front.
    pub max_len: usize,
    pub mcq_choices: usize,
    pub absent_keys: usize,
    /// Tokens generated per prompt at evaluation.
    pub max_new_tokens: usize,
}

impl Default for InstructSection {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 3,
                warmup_steps: 20,
                ..TrainConfig::instruct()
            },
            max_len: 256,
            mcq_choices: crate::instruct::DEFAULT_MCQ_CHOICES,
            absent_keys: 1,
            max_new_tokens: 8,
        }
    }
}

/// The toy scale used for ablation grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub eval_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            eval_seed: 999,
            model: toy_model(),
            train: toy_train(),
        }
    }
}

/// Two layers at width 32: about 53k parameters at vocabulary 540.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_ff: 64,
        max_context: 256,
        spatial_bins: 64,
        attention: AttentionConfig {
            d_model: 32,
            n_heads: 4,
            ..AttentionConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn toy_train() -> TrainConfig {
    TrainConfig {
        lr: 6e-3,
        warmup_steps: 30,
        epochs: 8,
        chunk_len: 256,
        ..TrainConfig::pretrain()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: SynthesisConfig,
    /// `vocab_size` is replaced by the corpus vocabulary size.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub instruct: InstructSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: SynthesisConfig::default(),
            model: toy_model(),
            pretrain: toy_train(),
            instruct: InstructSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

/// Flattens nested tables into dotted keys; arrays stay leaves.
pub fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, t: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                Value::Table(inner) => walk(&key, inner, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut t = &mut root;
        for p in parts {
            t = t
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("prefix of a dotted key is a table");
        }
        t.insert(last.to_string(), v.clone());
    }
    root
}

/// Parses the right-hand side of an override: a TOML value, or a bare
/// string when it is not one.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Merges `text` and `overrides` over the defaults.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let defaults = Table::try_from(RunConfig::default()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut flat = flatten(&defaults);
        let set = |key: String, value: Value, flat: &mut BTreeMap<String, Value>| {
            if !flat.contains_key(&key) {
                return Err(ConfigError::UnknownKey(key));
            }
            flat.insert(key, value);
            Ok(())
        };
        if let Some(text) = text {
            let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
            for (k, v) in flatten(&table) {
                set(k, v, &mut flat)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            set(k.trim().to_string(), parse_value(v.trim()), &mut flat)?;
        }
        let cfg: RunConfig = Value::Table(unflatten(&flat))
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.corpus.validate().map_err(|e| inv(e.to_string()))?;
        self.pretrain.validate().map_err(|e| inv(e.to_string()))?;
        self.instruct.train.validate().map_err(|e| inv(e.to_string()))?;
        self.ablation.train.validate().map_err(|e| inv(e.to_string()))?;
        Ok(())
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
