use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::models::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleStage,
    TwoStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Joint,
    ClsFixed,
}

fn default_epochs() -> usize {
    30
}
fn default_stage_epochs() -> [usize; 2] {
    [15, 15]
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f32 {
    1e-3
}
fn default_min_lr() -> f32 {
    1e-5
}
fn default_true() -> bool {
    true
}

/// Training run description; every field except `lambda` has a default.
///
/// ```json
/// {
///   "lambda": 1.0,
///   "strategy": "single_stage",
///   "setting": "joint",
///   "epochs": 30,
///   "stage_epochs": [15, 15],
///   "batch_size": 128,
///   "seed": 0,
///   "lr": 0.001,
///   "min_lr": 0.00001,
///   "train_data": ["data/train.bin"],
///   "test_data": ["data/test.bin"],
///   "teacher": "teacher.ckpt",
///   "arch": { "patch_size": 8, "num_res_blocks": 4, ... }
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f32,
    #[serde(default = "TrainConfig::default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "TrainConfig::default_setting")]
    pub setting: Setting,
    /// Epochs of single-stage training (and of teacher training).
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs of the two stages of the two-stage strategy.
    #[serde(default = "default_stage_epochs")]
    pub stage_epochs: [usize; 2],
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_min_lr")]
    pub min_lr: f32,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub normalization: Normalization,
    /// Include the feature MSE term in stage 2 of the two-stage strategy.
    #[serde(default)]
    pub stage2_mse: bool,
    /// Evaluate on the test set every this many epochs (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
    /// Use only the first records of each split.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub train_data: Vec<PathBuf>,
    #[serde(default)]
    pub test_data: Vec<PathBuf>,
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    #[serde(default)]
    pub arch: ArchConfig,
}

impl TrainConfig {
    fn default_strategy() -> Strategy {
        Strategy::SingleStage
    }
    fn default_setting() -> Setting {
        Setting::Joint
    }

    pub fn new(lambda: f32, arch: ArchConfig) -> Self {
        TrainConfig {
            lambda,
            strategy: Strategy::SingleStage,
            setting: Setting::Joint,
            epochs: default_epochs(),
            stage_epochs: default_stage_epochs(),
            batch_size: default_batch(),
            seed: 0,
            lr: default_lr(),
            min_lr: default_min_lr(),
            augment: true,
            normalization: Normalization::default(),
            stage2_mse: false,
            eval_every: 0,
            train_limit: None,
            test_limit: None,
            train_data: vec![],
            test_data: vec![],
            teacher: None,
            arch,
        }
    }

    /// Checks everything needed for student training.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.validate_common()?;
        match self.strategy {
            Strategy::SingleStage if self.epochs == 0 => {
                Err(Error::Config("single_stage needs epochs > 0".into()))
            }
            Strategy::TwoStage if self.stage_epochs.contains(&0) => {
                Err(Error::Config("two_stage needs both stage epoch counts > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Checks the fields teacher training uses.
    pub fn validate_common(&self) -> Result<()> {
        self.arch.validate()?;
        self.normalization.validate()?;
        if self.arch.input_hw != [crate::data::SIDE; 2] {
            return Err(Error::Config(format!(
                "datasets hold 32x32 images but arch.input_hw is {:?}",
                self.arch.input_hw
            )));
        }
        if self.arch.classes != crate::data::NUM_CLASSES {
            return Err(Error::Config(format!(
                "datasets have {} classes but arch.classes is {}",
                crate::data::NUM_CLASSES,
                self.arch.classes
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return Err(Error::Config("need 0 <= min_lr <= lr and lr > 0".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
