//! The run configuration document shared by every pipeline stage.
//!
//! A run starts from [`RunConfig::default`], overlays the JSON file if one is
//! given, then applies `key.path = value` overrides. Unknown keys are
//! rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datakit::SyntheticConfig;
use crate::evalkit::{check_thresholds, ReportFormat, DEFAULT_THRESHOLDS_KM};
use crate::fusion::FusionConfig;
use crate::inference::InferenceConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {source}")]
    Json {
        origin: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("override {key:?}: {msg}")]
    Override { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory written by `synth`.
    pub data_dir: String,
    pub manifest: String,
    pub hierarchy: String,
    pub checkpoint: String,
    pub train_log: String,
    /// Predictions CSV; the JSON records go to the same stem with `.json`.
    pub predictions: String,
    pub truth: String,
    /// Report destination; empty prints to stdout.
    pub report: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            manifest: "data/manifest.jsonl".into(),
            hierarchy: "out/hierarchy.json".into(),
            checkpoint: "out/model.gsck".into(),
            train_log: "out/train_log.jsonl".into(),
            predictions: "out/predictions.csv".into(),
            truth: "data/truth_test.csv".into(),
            report: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Named fractions applied by `synth`; they must sum to one.
    pub fractions: Vec<(String, f64)>,
    pub seed: u64,
    pub train: String,
    pub val: String,
    /// Split that `infer` predicts.
    pub query: String,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: vec![("train".into(), 0.99), ("val".into(), 0.01)],
            seed: 0,
            train: "train".into(),
            val: "val".into(),
            query: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub tau_min: usize,
    /// Strictly decreasing, coarsest first.
    pub tau_max: Vec<usize>,
    /// Store member ids of every cell in the hierarchy file.
    pub with_members: bool,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            tau_min: 50,
            tau_max: vec![25000, 10000, 5000, 2000, 1000, 750, 500],
            with_members: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds_km: Vec<f64>,
    pub format: ReportFormat,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds_km: DEFAULT_THRESHOLDS_KM.to_vec(),
            format: ReportFormat::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Worker threads; `None` leaves the choice to the environment.
    pub threads: Option<usize>,
    pub paths: PathsConfig,
    pub synth: SyntheticConfig,
    pub split: SplitConfig,
    pub partition: PartitionConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

/// Merges `top` into `base`, descending into objects.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_value(v: Value, origin: &str) -> Result<Self, ConfigError> {
        let mut base = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut base, v);
        let cfg: Self = serde_json::from_value(base).map_err(|source| ConfigError::Json {
            origin: origin.to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file, then each `(dotted.key, value)` override.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut doc = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|source| ConfigError::Json {
                    origin: p.display().to_string(),
                    source,
                })?
            }
            None => Value::Object(Default::default()),
        };
        let known = serde_json::to_value(Self::default()).expect("config serializes");
        for (key, value) in overrides {
            set_path(&mut doc, &known, key, value.clone())?;
        }
        let origin = file.map_or("overrides".to_string(), |p| p.display().to_string());
        Self::from_value(doc, &origin)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.threads == Some(0) {
            return invalid("threads must be positive".into());
        }
        self.fusion.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        check_thresholds(&self.eval.thresholds_km).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let p = &self.partition;
        if p.tau_min == 0 || p.tau_max.is_empty() {
            return invalid("partition needs tau_min >= 1 and at least one tau_max".into());
        }
        if p.tau_max.windows(2).any(|w| w[0] <= w[1]) || p.tau_max.iter().any(|&t| t < p.tau_min) {
            return invalid(format!("tau_max {:?} must be strictly decreasing and >= tau_min", p.tau_max));
        }
        let sum: f64 = self.split.fractions.iter().map(|f| f.1).sum();
        if self.split.fractions.is_empty() || (sum - 1.0).abs() > 1e-9 {
            return invalid(format!("split fractions must sum to 1, got {sum}"));
        }
        if self.inference.top_k == 0 {
            return invalid("inference.top_k must be positive".into());
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// The config as embedded in artifacts. `threads` is dropped because
    /// results do not depend on it, so artifacts hash the same on any machine.
    pub fn provenance(&self) -> Value {
        let mut v = self.to_value();
        v.as_object_mut().expect("object").remove("threads");
        v
    }

    pub fn provenance_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.provenance()).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Sets `key` (dot separated) in `doc`, rejecting keys absent from `known`.
fn set_path(doc: &mut Value, known: &Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let err = |msg: &str| ConfigError::Override {
        key: key.to_string(),
        msg: msg.to_string(),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty key segment"));
    }
    let mut k = known;
    for p in &parts {
        k = k.get(p).ok_or_else(|| err("no such key"))?;
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| err("parent is not an object"))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| err("parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
