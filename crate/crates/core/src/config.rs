//! Run configuration file (TOML) with one table per component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{ConfigError, Result};
use crate::harness::VariantSpec;
use crate::heads::HeadConfig;
use crate::losses::LossConfig;
use crate::scenegen::SceneConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub real_train: usize,
    pub val: usize,
    pub synthetic: usize,
    pub seed: u64,
    pub noise: f64,
    pub far_depth: f64,
    pub travel: f64,
    pub start_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self {
            real_train: 1000,
            val: 200,
            synthetic: 3000,
            seed: 0,
            noise: scene.noise,
            far_depth: scene.far_depth,
            travel: scene.travel,
            start_jitter: scene.start_jitter,
        }
    }
}

impl DataConfig {
    /// Scene geometry matching the backbone's input and patch grid.
    pub fn scene(&self, backbone: &BackboneConfig) -> SceneConfig {
        SceneConfig {
            frames: backbone.frames,
            height: backbone.height,
            width: backbone.width,
            cell_h: backbone.patch_h,
            cell_w: backbone.patch_w,
            noise: self.noise,
            far_depth: self.far_depth,
            travel: self.travel,
            start_jitter: self.start_jitter,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub losses: LossConfig,
    pub trainer: TrainConfig,
    pub variant: VariantSpec,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(ConfigError::from)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        self.backbone.validate()?;
        self.losses.validate()?;
        self.trainer.validate()?;
        if self.data.real_train == 0 {
            return Err(ConfigError::Invalid("data.real_train must be positive".into()));
        }
        Ok(())
    }
}
