//! TOML run configuration. Sections mirror the library modules; command-line
//! flags override file values, which override built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result, UaganError};
use crate::losses::{LossWeights, LrSchedule};
use crate::networks::{Preset, UNetConfig};
use crate::phantom::PhantomParams;
use crate::trainer::{RunManifest, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_patients: usize,
    pub test_patients: usize,
    pub modalities: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { train_patients: 30, test_patients: 10, modalities: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub variant: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub beta1: f32,
    pub beta2: f32,
    pub resample_critic_targets: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerSection {
            variant: t.variant,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            deterministic: t.deterministic,
            checkpoint_every: t.checkpoint_every,
            augment: t.augment,
            beta1: t.beta1,
            beta2: t.beta2,
            resample_critic_targets: t.resample_critic_targets,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub phantom: PhantomParams,
    pub network: UNetConfig,
    pub losses: LossWeights,
    pub schedule: LrSchedule,
    pub trainer: TrainerSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| UaganError::Config(e.to_string()))
    }

    /// Reads a TOML config, or the config closure of a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            return Ok(RunConfig::from_train_config(&RunManifest::load(path)?.config));
        }
        let text = fs::read_to_string(path).at(path)?;
        RunConfig::from_toml_str(&text).map_err(|e| UaganError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| UaganError::Config(e.to_string()))
    }

    pub fn train_config(&self, train_data: PathBuf) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            variant: t.variant,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            deterministic: t.deterministic,
            train_data,
            checkpoint_every: t.checkpoint_every,
            augment: t.augment,
            beta1: t.beta1,
            beta2: t.beta2,
            resample_critic_targets: t.resample_critic_targets,
            weights: self.losses.clone(),
            lr: self.schedule.clone(),
            network: UNetConfig { modalities: self.data.modalities, ..self.network.clone() },
        }
    }

    pub fn from_train_config(c: &TrainConfig) -> Self {
        RunConfig {
            data: DataSection { modalities: c.network.modalities, ..Default::default() },
            phantom: PhantomParams::default(),
            network: c.network.clone(),
            losses: c.weights.clone(),
            schedule: c.lr.clone(),
            trainer: TrainerSection {
                variant: c.variant,
                epochs: c.epochs,
                batch_size: c.batch_size,
                seed: c.seed,
                deterministic: c.deterministic,
                checkpoint_every: c.checkpoint_every,
                augment: c.augment,
                beta1: c.beta1,
                beta2: c.beta2,
                resample_critic_targets: c.resample_critic_targets,
            },
        }
    }
}
