//! Versioned run configuration (TOML).
//!
//! Every field has a default, so an empty file describes the standard
//! setting on the toy backbone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneName};
use crate::error::{Error, Result};
use crate::eval::Accumulation;
use crate::inference::{InferenceConfig, PATCH_IMAGE_SIZE};
use crate::optimizer::OptimizationConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    pub accumulation: Accumulation,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            validation: None,
            test: None,
            accumulation: Accumulation::Dataset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub backbone: BackboneConfig,
    pub optimization: OptimizationConfig,
    pub inference: InferenceConfig,
    pub data: DataConfig,
    /// Seeds of repeated runs.
    pub seeds: Vec<u64>,
    pub output_root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            backbone: BackboneConfig::default(),
            optimization: OptimizationConfig::default(),
            inference: InferenceConfig::default(),
            data: DataConfig::default(),
            seeds: vec![0, 1, 2],
            output_root: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Checks everything that does not need the backbone loaded.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let max_t = match self.backbone.name {
            BackboneName::Toy => 1000,
            BackboneName::Sd21 => 999,
        };
        self.optimization.validate(max_t)?;
        let inf = &self.inference;
        if inf.t_test > max_t {
            return Err(Error::Config(format!(
                "t_test {} exceeds {max_t}",
                inf.t_test
            )));
        }
        if inf.target.0 == 0 || inf.target.1 == 0 {
            return Err(Error::Config("inference target must be non-empty".into()));
        }
        if inf.patch_size.is_some_and(|p| 2 * p < PATCH_IMAGE_SIZE) {
            return Err(Error::Config(format!(
                "patch_size must be at least {} so corner patches cover the image",
                PATCH_IMAGE_SIZE / 2
            )));
        }
        Ok(())
    }

    /// Applies a dotted-key override such as `optimization.lr = 0.05`.
    pub fn with_override(&self, key: &str, value: &toml::Value) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{key}' does not name a config field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let config: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}
