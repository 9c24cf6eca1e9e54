use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sshp::analysis::ClusterConfig;
use sshp::inference::FitOptions;
use sshp::model::{HyperParams, InitConfig};
use sshp::simulation::SyntheticConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub events: Option<PathBuf>,
    pub assignments: Option<PathBuf>,
    pub grades: Option<PathBuf>,
    /// Extra wholly held-out sequences (events.csv format) added to the
    /// completely-missing test set by `evaluate`.
    pub heldout: Option<PathBuf>,
    /// Course end in hours; inferred from the data when absent.
    pub course_end_hours: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub holdout_fraction: f64,
    pub train_fraction: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            train_fraction: 0.7,
        }
    }
}

/// Everything a subcommand needs besides its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub hyper: HyperParams,
    pub init: InitConfig,
    pub fit: FitOptions,
    pub synthetic: SyntheticConfig,
    pub split: SplitFractions,
    /// `fit` trains on the training part of the split instead of the whole
    /// dataset, giving the model `evaluate` would fit.
    pub fit_on_split: bool,
    pub cluster: ClusterConfig,
    /// Components to switch off, letters from `s`, `o`, `h`, `d`.
    pub ablate: String,
    /// Pre-fitted model for `predict`, `evaluate` and `cluster`.
    pub model: Option<PathBuf>,
}

/// Reads the JSON config (or the defaults), applies `key=value` overrides
/// and decodes the result.
pub fn resolve(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, UsageError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for (key, value) in overrides {
        set_key(&mut doc, key, value.clone())?;
    }
    serde_json::from_value(doc).map_err(|e| UsageError(format!("config: {e}")))
}

fn set_key(doc: &mut Value, key: &str, value: Value) -> Result<(), UsageError> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("bad config key `{key}`")));
    }
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(UsageError(format!("config key `{key}` does not name an object")));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(UsageError(format!("config key `{key}` does not name an object"))),
    }
}

/// Parses `key=value`; the value is read as JSON and falls back to a
/// plain string.
pub fn parse_assignment(raw: &str) -> Result<(String, Value), UsageError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| UsageError(format!("expected KEY=VALUE, got `{raw}`")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}
