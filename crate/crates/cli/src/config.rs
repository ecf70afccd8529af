//! Layered run configuration: preset, then an optional JSON file, then
//! command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use eqocc::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
        }
    }

    /// Overlay a JSON file of the shape `{"model": {..}, "train": {..}}`
    /// where every key is optional. Unknown keys are rejected.
    pub fn overlay_file(self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        self.overlay(patch).with_context(|| format!("applying config {}", path.display()))
    }

    pub fn overlay(self, patch: Value) -> Result<Self> {
        let Value::Object(obj) = &patch else {
            bail!("config must be a JSON object");
        };
        if let Some(k) = obj.keys().find(|k| *k != "model" && *k != "train") {
            bail!("unknown config section '{k}' (expected 'model' or 'train')");
        }
        let mut base = serde_json::to_value(&self)?;
        merge(&mut base, patch);
        let cfg: RunConfig = serde_json::from_value(base)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Recursive object merge; non-object values in `patch` replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn file_values_override_the_preset() {
        let cfg = RunConfig::desk()
            .overlay(json!({"model": {"mult": 4, "heads": 2}, "train": {"batch": 3}}))
            .unwrap();
        assert_eq!(cfg.model.mult, 4);
        assert_eq!(cfg.train.batch, 3);
        assert_eq!(cfg.model.k, ModelConfig::desk().k);
        assert_eq!(cfg.train.lr_end, TrainConfig::desk().lr_end);
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_rejected() {
        assert!(RunConfig::desk().overlay(json!({"model": {"mul": 4}})).is_err());
        assert!(RunConfig::desk().overlay(json!({"optim": {}})).is_err());
        assert!(RunConfig::desk().overlay(json!({"model": {"mult": 5, "heads": 2}})).is_err());
        assert!(RunConfig::desk().overlay(json!([1, 2])).is_err());
    }

    #[test]
    fn shipped_config_files_match_the_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        // Start from the opposite preset so every field must come from the file.
        assert_eq!(RunConfig::paper().overlay_file(&dir.join("desk.json")).unwrap(), RunConfig::desk());
        assert_eq!(RunConfig::desk().overlay_file(&dir.join("paper.json")).unwrap(), RunConfig::paper());
    }
}
