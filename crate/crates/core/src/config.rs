//! The single JSON run configuration: model + stages, fusion, training,
//! data, and inference sections plus run metadata. Unknown keys are
//! rejected everywhere, and every run echoes its resolved config next to
//! its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, make_synthetic, DatasetHandle, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::optim::{OptimizerKind, Schedule};
use crate::vit::ModelConfig;

/// Threshold grid used by default sweeps.
pub const DEFAULT_TAU_GRID: [f64; 12] =
    [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 2.0, 2.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default)]
    pub strategy: FusionStrategy,
    #[serde(default)]
    pub alpha_init: f32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { strategy: FusionStrategy::Linear, alpha_init: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStrategy {
    Joint,
    Sandwich,
    Stochastic,
}

impl Default for TrainStrategy {
    fn default() -> Self {
        TrainStrategy::Joint
    }
}

fn default_log_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub strategy: TrainStrategy,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Override; defaults to ceil(train size / batch size).
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive when set".into()));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum DataConfig {
    IdxFiles {
        dir: PathBuf,
    },
    Synthetic {
        train_size: usize,
        val_size: usize,
        #[serde(default)]
        difficulty_mix: f64,
    },
}

fn default_tau_grid() -> Vec<f64> {
    DEFAULT_TAU_GRID.to_vec()
}

fn default_eval_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Threshold for single-τ evaluation; sweeps use `tau_list`.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_tau_grid")]
    pub tau_list: Vec<f64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            tau: None,
            tau_list: default_tau_grid(),
            eval_batch: default_eval_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.strategy != TrainStrategy::Joint && self.model.num_stages() < 3 {
            return Err(Error::Config(
                "sandwich and stochastic training need at least 3 stages".into(),
            ));
        }
        match &self.data {
            DataConfig::Synthetic { train_size, val_size, difficulty_mix } => {
                if *train_size == 0 || *val_size == 0 {
                    return Err(Error::Config("synthetic split sizes must be positive".into()));
                }
                if !(0.0..=1.0).contains(difficulty_mix) {
                    return Err(Error::Config(format!(
                        "difficulty_mix must be in [0, 1], got {difficulty_mix}"
                    )));
                }
            }
            DataConfig::IdxFiles { dir } => {
                if dir.as_os_str().is_empty() {
                    return Err(Error::Config("idx_files needs a directory".into()));
                }
            }
        }
        if self.inference.tau_list.is_empty() {
            return Err(Error::Config("tau_list must not be empty".into()));
        }
        if self.inference.tau_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("tau_list must be strictly ascending".into()));
        }
        if self.inference.tau_list.iter().any(|t| *t < 0.0 || t.is_nan()) {
            return Err(Error::Config("thresholds must be >= 0".into()));
        }
        if let Some(t) = self.inference.tau {
            if t < 0.0 || t.is_nan() {
                return Err(Error::Config("tau must be >= 0".into()));
            }
        }
        if self.inference.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Materialize the configured dataset. Synthetic data derives its
    /// seed from the run seed, so a config fully determines the bytes.
    pub fn load_dataset(&self) -> Result<DatasetHandle> {
        match &self.data {
            DataConfig::Synthetic { train_size, val_size, difficulty_mix } => {
                make_synthetic(&SyntheticSpec {
                    num_classes: self.model.num_classes,
                    image_size: self.model.image_size,
                    train_size: *train_size,
                    val_size: *val_size,
                    difficulty_mix: *difficulty_mix,
                    seed: self.seed,
                })
            }
            DataConfig::IdxFiles { dir } => {
                load_idx(dir, self.model.num_classes, self.model.image_size)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_json() -> String {
        r#"{
            "seed": 7,
            "model": {
                "image_size": 8, "patch_size": 4, "num_layers": 1,
                "head_dim": 4, "num_classes": 3,
                "stages": [
                    {"heads": 1, "loss_weight": 0.5},
                    {"heads": 2, "loss_weight": 0.5}
                ]
            },
            "train": {"epochs": 1, "batch_size": 4, "learning_rate": 1e-3},
            "data": {"source": "synthetic", "train_size": 8, "val_size": 4}
        }"#
        .to_string()
    }

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_json_str(&toy_json()).unwrap();
        assert_eq!(cfg.fusion.strategy, FusionStrategy::Linear);
        assert_eq!(cfg.fusion.alpha_init, 0.0);
        assert_eq!(cfg.train.strategy, TrainStrategy::Joint);
        assert_eq!(cfg.inference.tau_list, DEFAULT_TAU_GRID.to_vec());
        assert_eq!(cfg.model.mlp_ratio, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = toy_json().replace("\"seed\": 7,", "\"seed\": 7, \"extra_key\": 1,");
        assert!(RunConfig::from_json_str(&bad).is_err());
        let bad = toy_json().replace("\"epochs\": 1,", "\"epochs\": 1, \"warmup\": 5,");
        assert!(RunConfig::from_json_str(&bad).is_err());
    }

    #[test]
    fn sampled_strategies_need_three_stages() {
        let two_stage =
            toy_json().replace("\"learning_rate\": 1e-3", "\"learning_rate\": 1e-3, \"strategy\": \"sandwich\"");
        assert!(matches!(
            RunConfig::from_json_str(&two_stage),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tau_list_must_ascend() {
        let bad = toy_json().replace(
            "\"data\":",
            "\"inference\": {\"tau_list\": [0.5, 0.1]}, \"data\":",
        );
        assert!(RunConfig::from_json_str(&bad).is_err());
    }

    #[test]
    fn resolved_json_round_trips() {
        let cfg = RunConfig::from_json_str(&toy_json()).unwrap();
        let echoed = cfg.to_pretty_json().unwrap();
        let back = RunConfig::from_json_str(&echoed).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn synthetic_dataset_loads_from_config() {
        let cfg = RunConfig::from_json_str(&toy_json()).unwrap();
        let data = cfg.load_dataset().unwrap();
        assert_eq!(data.train.len(), 8);
        assert_eq!(data.val.len(), 4);
        assert_eq!(data.num_classes(), 3);
    }
}
