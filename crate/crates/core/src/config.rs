//! The JSON run configuration read by `coopnet train`.
//!
//! Every section and every key is optional; missing keys take the defaults
//! below. Unknown keys are rejected. Defaults:
//!
//! | key | default |
//! |---|---|
//! | `seed` | 0 |
//! | `pipeline` | lowercase, ASCII punctuation deleted, English stopwords, Porter stemming, `min_count` 1, no length cap |
//! | `model` | `dim` 10, `unroll` 1, `depth_z` 1, `depth_theta` 1, all dropout rates 0.1, `classes` 2 |
//! | `train` | `batch_size` 100, `num_batches` 300, Adam `learning_rate` 1e-3, `beta1` 0.9, `beta2` 0.999, `epsilon` 1e-8, `eval_every` 10, unit class weights |
//! | `data` | no paths |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::PipelineConfig;
use crate::diff::LossConfig;
use crate::error::{Error, Result};
use crate::model::HyperParams;
use crate::train::{AdamConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub num_batches: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub eval_every: usize,
    /// Per-class loss weights; `None` means all 1.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSettings {
            batch_size: 100,
            num_batches: 300,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            eval_every: 10,
            class_weights: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Encoded training corpus.
    pub train: Option<PathBuf>,
    /// Encoded corpus used for model selection and the reported metrics.
    pub validation: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub model: HyperParams,
    pub train: TrainSettings,
    pub data: DataPaths,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The full configuration, defaults included, as written next to a
    /// run's outputs.
    pub fn to_json(&self) -> String {
        crate::fmt::to_json_string(self)
    }

    /// Validated training configuration; the loss kind follows the class
    /// count.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let mut loss = LossConfig::for_classes(self.model.classes);
        if let Some(w) = &t.class_weights {
            loss.class_weights = w.clone();
        }
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            num_batches: t.num_batches,
            adam: AdamConfig {
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            seed: self.seed,
            eval_every: t.eval_every,
            hyper: self.model.clone(),
            loss,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
