//! Resolved run configuration: defaults, then an optional JSON file, then
//! `section.field=value` overrides. Unknown keys are rejected at every layer.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::scenegen::GenConfig;
use crate::targets::TargetConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Seeds parameter init, alignment noise, shuffling and dropout.
    pub seed: u64,
    /// Dataset generation (carries its own seed).
    pub data: GenConfig,
    pub model: ModelConfig,
    pub align: AlignConfig,
    pub targets: TargetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(v)
    }

    /// Applies `key=value` assignments. Keys are dotted paths into the
    /// serialized config; values parse as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = self.to_value();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let slot = key
                .split('.')
                .try_fold(&mut v, |node, part| node.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            if slot.is_object() {
                return Err(Error::Config(format!("`{key}` is a section, not a field")));
            }
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        let c = Self::from_value(v)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.align.validate()?;
        self.train.validate()?;
        if self.eval.top_k == 0 {
            return Err(Error::Config("eval.top_k must be positive".into()));
        }
        Ok(())
    }

    /// Copies dataset-derived dimensions (grid, channels, vocabulary) into the
    /// model section.
    pub fn sync_model_to_data(&mut self) {
        self.model.input_dim = self.data.input_dim();
        self.model.grid_h = self.data.grid_h;
        self.model.grid_w = self.data.grid_w;
        self.model.num_verbs = self.data.vocab.num_verbs;
        self.model.num_nouns = self.data.vocab.num_nouns;
    }
}
