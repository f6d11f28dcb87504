use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CropPolicy;
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    /// JSON array of training image paths.
    pub manifest: Option<PathBuf>,
    /// Held-out images for validation; training images (disjoint draws)
    /// when absent.
    pub validation_manifest: Option<PathBuf>,
    pub output: PathBuf,
    /// PSNR checkpoint the GAN stage starts from.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            manifest: None,
            validation_manifest: None,
            output: PathBuf::from("runs/nlcunet"),
            init_checkpoint: None,
        }
    }
}

/// One document describing a whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degradation: DegradationSpec,
    pub crop: CropPolicy,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            degradation: DegradationSpec::config1(4, 0).expect("x4 is supported"),
            crop: CropPolicy::default(),
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.crop.seed = seed;
        self.degradation.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.degradation.validate()?;
        if self.model.scale != self.degradation.scale {
            return Err(Error::Config(format!(
                "model.scale {} differs from degradation.scale {}",
                self.model.scale, self.degradation.scale
            )));
        }
        if self.crop.patch_size == 0 {
            return Err(Error::Config("crop.patch_size must be >= 1".into()));
        }
        Ok(())
    }
}
