//! Resolved run configuration: defaults, then a flat dotted-key JSON file, then flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use transfusion::data::{CannyParams, PhantomSpec};
use transfusion::deploy::DistillConfig;
use transfusion::model::ModelConfig;
use transfusion::train::TrainConfig;

use crate::error::CliError;

/// Pseudo-key that rebuilds the model config at a given base width.
pub const BASE_WIDTH_KEY: &str = "model.base_width";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Phantom volumes written by `gen-data`.
    pub volumes: usize,
    /// Train fraction when no separate test set is given.
    pub split_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            volumes: 4,
            split_ratio: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub sigma: f64,
    pub gzip: bool,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig { sigma: 1.0, gzip: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub canny: CannyParams,
    pub data: DataConfig,
    pub distill: DistillConfig,
    pub reconstruct: ReconstructConfig,
}

/// Ordered `(dotted key, value)` pairs; later entries win.
pub type Overrides = Vec<(String, Value)>;

fn flatten(prefix: &str, v: &Value, out: &mut Overrides) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Reads a JSON object whose keys are dotted paths. Nested objects are
/// accepted and flattened.
pub fn read_config_file(path: &Path) -> Result<Overrides, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::validation(format!("{}: expected a JSON object", path.display())));
    }
    let mut out = Vec::new();
    flatten("", &v, &mut out);
    Ok(out)
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::validation(format!("unknown config key {key:?}"));
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj: &mut Map<String, Value> = cur.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(part).ok_or_else(unknown)?;
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(unknown())
}

/// Applies overrides to the defaults and validates the result.
pub fn resolve(overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut base = RunConfig::default();
    if let Some((_, v)) = overrides.iter().rev().find(|(k, _)| k == BASE_WIDTH_KEY) {
        let b = v
            .as_u64()
            .filter(|&b| b > 0)
            .ok_or_else(|| CliError::validation(format!("{BASE_WIDTH_KEY} must be a positive integer, got {v}")))?;
        base.model = ModelConfig::with_base_width(b as usize);
    }
    let mut tree = serde_json::to_value(&base).expect("config serializes");
    for (k, v) in overrides.iter().filter(|(k, _)| k != BASE_WIDTH_KEY) {
        set_path(&mut tree, k, v.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::validation(format!("config: {e}")))?;
    cfg.train.validate()?;
    cfg.phantom.validate()?;
    cfg.distill.validate()?;
    if !(cfg.data.split_ratio > 0.0 && cfg.data.split_ratio < 1.0) {
        return Err(CliError::validation("data.split_ratio must lie in (0, 1)"));
    }
    if !(cfg.reconstruct.sigma >= 0.0 && cfg.reconstruct.sigma.is_finite()) {
        return Err(CliError::validation("reconstruct.sigma must be ≥ 0"));
    }
    Ok(cfg)
}

/// True when `key` or one of its ancestors was overridden.
pub fn is_set(overrides: &Overrides, key: &str) -> bool {
    overrides
        .iter()
        .any(|(k, _)| k == key || key.starts_with(&format!("{k}.")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn later_overrides_win() {
        let o = vec![
            ("train.epochs".to_string(), json!(5)),
            ("train.epochs".to_string(), json!(7)),
            ("train.lr0".to_string(), json!(0.01)),
        ];
        let cfg = resolve(&o).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr0, 0.01);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        assert!(resolve(&vec![("train.epoch".into(), json!(5))]).is_err());
        assert!(resolve(&vec![("train.epochs.x".into(), json!(5))]).is_err());
        assert!(resolve(&vec![("train.epochs".into(), json!("five"))]).is_err());
        assert!(resolve(&vec![("train.epochs".into(), json!(0))]).is_err());
    }

    #[test]
    fn base_width_rebuilds_model_before_other_keys() {
        let o = vec![
            ("model.semantic.attention.n_layers".to_string(), json!(2)),
            (BASE_WIDTH_KEY.to_string(), json!(4)),
        ];
        let cfg = resolve(&o).unwrap();
        let mut want = ModelConfig::with_base_width(4);
        want.semantic.attention.n_layers = 2;
        assert_eq!(cfg.model, want);
    }

    #[test]
    fn nested_files_flatten_to_dotted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"epochs": 3}, "phantom.n_slices": 2}"#).unwrap();
        let o = read_config_file(&p).unwrap();
        let cfg = resolve(&o).unwrap();
        assert_eq!((cfg.train.epochs, cfg.phantom.n_slices), (3, 2));
        assert!(is_set(&o, "train.epochs") && !is_set(&o, "train.lr0"));
    }
}
