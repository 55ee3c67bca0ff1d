//! Run configuration, stored as TOML. Every field has a default, so an empty
//! file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::HeadConfig;
use crate::data::{GeneratorConfig, SplitSpec};
use crate::detectors::KMeansConfig;
use crate::error::{Error, Result};
use crate::mae::{MaeConfig, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub init: u64,
    pub training: u64,
    pub mc: u64,
    /// Masks used for validation losses and reconstruction scores.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            split: 2,
            init: 3,
            training: 4,
            mc: 5,
            eval: 6,
        }
    }
}

impl Seeds {
    /// Every seed shifted by `offset`.
    pub fn offset(&self, offset: u64) -> Self {
        Self {
            data: self.data.wrapping_add(offset),
            split: self.split.wrapping_add(offset),
            init: self.init.wrapping_add(offset),
            training: self.training.wrapping_add(offset),
            mc: self.mc.wrapping_add(offset),
            eval: self.eval.wrapping_add(offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub quantile: f64,
    /// Frame slots per reconstruction-scoring group.
    pub group_frames: usize,
    pub mc_passes: usize,
    pub kmeans: KMeansConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            quantile: 0.99,
            group_frames: 128,
            mc_passes: 100,
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub out_dir: PathBuf,
    /// Recording to use instead of generated data.
    pub input_csv: Option<PathBuf>,
    /// Stride between windows when ingesting `input_csv`.
    pub stride: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            input_csv: None,
            stride: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub generator: GeneratorConfig,
    pub split: SplitSpec,
    pub mae: MaeConfig,
    pub pretrain: PretrainConfig,
    pub head: HeadConfig,
    pub detectors: DetectorConfig,
    pub paths: PathConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Hex SHA-256 of the serialized configuration.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.mae.validate()?;
        if self.generator.window_len != self.mae.window_len
            || self.generator.channels != self.mae.channels
        {
            return Err(Error::Config(format!(
                "generator windows [{}, {}] do not match the autoencoder input [{}, {}]",
                self.generator.window_len,
                self.generator.channels,
                self.mae.window_len,
                self.mae.channels
            )));
        }
        let d = &self.detectors;
        if !(d.quantile > 0.0 && d.quantile <= 1.0) {
            return Err(Error::Config(format!(
                "quantile {} outside (0, 1]",
                d.quantile
            )));
        }
        if d.mc_passes < 2 {
            return Err(Error::Config("mc_passes must be at least 2".into()));
        }
        if d.group_frames < crate::data::FRAME_GROUP {
            return Err(Error::Config(format!(
                "group_frames must be at least {}",
                crate::data::FRAME_GROUP
            )));
        }
        if self.pretrain.batch_size == 0 || self.head.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}
