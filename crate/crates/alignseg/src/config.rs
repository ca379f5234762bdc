//! Application-level configuration: one JSON document with a section per
//! subsystem, loadable from a file and overridable key by key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::CorpusConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::segmentor::SegHeadConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TextConfig {
    pub d_t: usize,
    pub proj_dim: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            d_t: 64,
            proj_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AppConfig {
    pub data: CorpusConfig,
    pub encoder: EncoderConfig,
    pub seg_head: SegHeadConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
}

impl AppConfig {
    /// Loads a config file if given, otherwise the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p)?;
                Ok(serde_json::from_str(&raw)?)
            }
            None => Ok(Self::default()),
        }
    }

    /// Overrides every seed field with one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.encoder.seed = seed;
        self.text.seed = seed;
        self.train.seed = seed;
    }

    /// Applies `key=value` overrides. A dotted key (`train.iters`) addresses
    /// one location; a bare key (`iters`) is set at every place it occurs in
    /// the config tree. Values parse as JSON where possible, else as strings.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self)?;
        for (key, raw) in overrides {
            let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.clone()));
            if key.contains('.') {
                set_path(&mut tree, key, value)?;
            } else {
                let hits = set_everywhere(&mut tree, key, &value);
                if hits == 0 {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        *self = serde_json::from_value(tree)?;
        Ok(())
    }

    /// Derives the dependent fields and checks cross-section consistency.
    pub fn reconcile(&mut self) -> Result<()> {
        self.seg_head.in_dim = self.encoder.token_dim;
        self.seg_head.num_classes = self.data.num_classes() + 1;
        if self.encoder.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "encoder image_size {} != corpus image_size {}",
                self.encoder.image_size, self.data.image_size
            )));
        }
        self.data.validate()?;
        self.encoder.validate()?;
        self.seg_head.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not an object")))?;
        if i + 1 == parts.len() {
            let slot = obj
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            *slot = value;
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    unreachable!("empty key");
}

fn set_everywhere(tree: &mut Value, key: &str, value: &Value) -> usize {
    let mut hits = 0;
    if let Value::Object(map) = tree {
        for (k, v) in map.iter_mut() {
            if k == key {
                *v = value.clone();
                hits += 1;
            } else {
                hits += set_everywhere(v, key, value);
            }
        }
    }
    hits
}
