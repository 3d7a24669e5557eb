//! Run configuration: TOML file, dotted-path overrides, validation, hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::DataConfig;
use crate::dsa::DsaConfig;
use crate::error::{HatError, Result};
use crate::losses::LossConfig;
use crate::model::{FeatureMode, ModelSpec};
use crate::tfc::TfcConfig;
use crate::training::optim::OptimConfig;
use crate::training::schedule::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Save a checkpoint every this many epochs (0 keeps only the last).
    pub checkpoint_every: usize,
    /// Evaluate on query/gallery every this many epochs (0 only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 10,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_rank: usize,
    /// L2-normalize features before computing distances.
    pub normalize: bool,
    pub features: FeatureMode,
    /// Images per forward pass during feature extraction.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_rank: 10,
            normalize: false,
            features: FeatureMode::Concat,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub backbone: BackboneConfig,
    pub tfc: TfcConfig,
    pub dsa: DsaConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/default".into(),
            backbone: BackboneConfig::default(),
            tfc: TfcConfig::default(),
            dsa: DsaConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses an override value, guided by the type of the value it replaces.
fn parse_value(raw: &str, existing: Option<&toml::Value>) -> toml::Value {
    use toml::Value;
    let scalar = |s: &str, like: Option<&Value>| -> Value {
        let s = s.trim();
        match like {
            Some(Value::String(_)) => Value::String(s.to_string()),
            Some(Value::Float(_)) => s
                .parse::<f64>()
                .map(Value::Float)
                .unwrap_or_else(|_| Value::String(s.to_string())),
            _ => {
                if let Ok(i) = s.parse::<i64>() {
                    Value::Integer(i)
                } else if let Ok(f) = s.parse::<f64>() {
                    Value::Float(f)
                } else if let Ok(b) = s.parse::<bool>() {
                    Value::Boolean(b)
                } else {
                    Value::String(s.to_string())
                }
            }
        }
    };
    match existing {
        Some(Value::Array(items)) => {
            let like = items.first();
            let parts = raw.split(',').filter(|p| !p.trim().is_empty());
            Value::Array(parts.map(|p| scalar(p, like)).collect())
        }
        Some(Value::String(_)) => Value::String(raw.to_string()),
        other => {
            if raw.contains(',') {
                Value::Array(raw.split(',').map(|p| scalar(p, None)).collect())
            } else {
                scalar(raw, other)
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HatError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HatError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets `key` (dotted path such as `dsa.depths`) to `value`; a comma
    /// list becomes an array.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(HatError::Config(format!("malformed key {key:?}")));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*p))
                .ok_or_else(|| HatError::Config(format!("{key}: unknown section {p:?}")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| HatError::Config(format!("{key}: not inside a section")))?;
        let last = parts[parts.len() - 1];
        let parsed = parse_value(value, table.get(last));
        table.insert(last.to_string(), parsed);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| HatError::Config(format!("{key}={value}: {}", e.message())))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HatError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every problem found, each prefixed by the offending field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.output_dir.trim().is_empty() {
            errs.push("output_dir: must not be empty".into());
        }
        errs.extend(self.data.validate());
        let spec = self.model_spec(usize::MAX);
        errs.extend(spec.validate());
        errs.extend(self.loss.validate());
        errs.extend(self.schedule.validate());
        errs.extend(self.optim.validate());
        if self.eval.max_rank == 0 {
            errs.push("eval.max_rank: must be positive".into());
        }
        if self.eval.batch_size == 0 {
            errs.push("eval.batch_size: must be positive".into());
        }
        errs
    }

    /// Fails with all validation errors joined, one per line.
    pub fn validated(self) -> Result<Self> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(HatError::Config(errs.join("\n")))
        }
    }

    pub fn model_spec(&self, num_ids: usize) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            tfc: self.tfc.clone(),
            dsa: self.dsa.clone(),
            num_ids,
            image_height: self.data.image_height,
            image_width: self.data.image_width,
        }
    }

    /// Hex SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_field_types() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["dsa.depths=0,0,12,0", "loss.lambda=0", "data.source=synth://4/4/0"])
            .unwrap();
        assert_eq!(c.dsa.depths, vec![0, 0, 12, 0]);
        assert_eq!(c.loss.lambda, 0.0);
        assert_eq!(c.data.source, "synth://4/4/0");
        c.set("dsa.use_nea", "false").unwrap();
        assert!(!c.dsa.use_nea);
        c.set("eval.features", "backbone-only").unwrap();
        assert_eq!(c.eval.features, FeatureMode::BackboneOnly);
        c.set("backbone.weights", "w.ckpt").unwrap();
        assert_eq!(c.backbone.weights.as_deref(), Some("w.ckpt"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("dsa.depth", "1").is_err());
        assert!(c.set("nosuch.key", "1").is_err());
        assert!(RunConfig::from_toml_str("[loss]\nlamda = 0.5\n").is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.data.source = "synth://4/4/0".into();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.seed = 1;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn validation_is_itemized() {
        let mut c = RunConfig::default();
        c.dsa.depths = vec![0, 0, 0, 0];
        c.loss.epsilon = 1.5;
        let errs = c.validate();
        assert!(errs.iter().any(|e| e.starts_with("data.source")));
        assert!(errs.iter().any(|e| e.starts_with("dsa.depths")));
        assert!(errs.iter().any(|e| e.starts_with("loss.epsilon")));
    }
}
