//! Run configuration: one JSON document describing a training or
//! cross-validation experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::network::{LrMultipliers, NetConfig};
use crate::objective::{ObjectiveConfig, TaskMode};
use crate::optimizer::SgdConfig;

/// Objective settings other than the task mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub aux_weight: f64,
    pub decoupled_reg: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let o = ObjectiveConfig::default();
        LossConfig {
            gamma: o.gamma,
            aux_weight: o.aux_weight,
            decoupled_reg: o.decoupled_reg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TaskMode,
    pub net: NetConfig,
    pub optimizer: SgdConfig,
    pub multipliers: LrMultipliers,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Score evaluation views with ten crops instead of the center crop.
    pub ten_crop: bool,
    pub epochs: usize,
    /// Epochs of location-only training before the main schedule.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub folds: usize,
    /// Share of the training samples held out to monitor the plateau
    /// schedule when no separate validation set is given. Zero monitors
    /// the training loss instead.
    pub validation_fraction: f64,
    /// Log the loss of the untrained network as epoch 0.
    pub log_initial: bool,
    /// Training manifest.
    pub data: Option<PathBuf>,
    /// Validation manifest; overrides `validation_fraction`.
    pub validation_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TaskMode::Mtl,
            net: NetConfig::default(),
            optimizer: SgdConfig::default(),
            multipliers: LrMultipliers::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            ten_crop: true,
            epochs: 10,
            pretrain_epochs: 0,
            batch_size: 20,
            seed: 0,
            folds: 5,
            validation_fraction: 0.1,
            log_initial: true,
            data: None,
            validation_data: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            mode: self.mode,
            gamma: self.loss.gamma,
            aux_weight: self.loss.aux_weight,
            decoupled_reg: self.loss.decoupled_reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be positive".into()));
        }
        if self.augment.crop != self.net.input_size {
            return Err(Error::BadConfig(format!(
                "crop {} differs from network input size {}",
                self.augment.crop, self.net.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::BadConfig(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.loss.gamma >= 0.0) || !self.loss.aux_weight.is_finite() {
            return Err(Error::BadConfig("gamma must be >= 0 and aux_weight finite".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative data and output paths resolve against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.validation_data, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_documents() {
        let cfg = RunConfig {
            mode: TaskMode::LesionOnly,
            epochs: 3,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"epochs": 2, "optimizer": {"lr": 0.01}}"#).unwrap();
        assert_eq!(partial.epochs, 2);
        assert_eq!(partial.optimizer.lr, 0.01);
        assert_eq!(partial.optimizer.momentum, 0.9);
        assert_eq!(partial.batch_size, 20);
        assert!(RunConfig::from_json(r#"{"epoch": 2}"#).is_err());
    }

    #[test]
    fn validation() {
        RunConfig::default().validate().unwrap();
        let mut c = RunConfig::default();
        c.augment.crop = 24;
        assert!(c.validate().is_err());
        let c = RunConfig {
            batch_size: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
