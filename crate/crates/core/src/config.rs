//! The run configuration shared by every command, loadable from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crosstube::AssignConfig;
use crate::error::{Error, Result};
use crate::matchloss::LossWeights;
use crate::model::ModelConfig;
use crate::tracker::InferenceConfig;
use crate::train::{OptimConfig, TrainConfig};
use crate::types::TaskMode;

/// Association settings used when stitching windows into tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub score_thresh: f64,
    pub overlap_thresh: f64,
    pub match_thresh: f64,
    pub max_age: usize,
    /// Window start spacing; unset means back-to-back windows.
    pub stride: Option<usize>,
    pub linked_embeddings: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        let d = InferenceConfig::default();
        TrackerConfig {
            score_thresh: d.score_thresh,
            overlap_thresh: d.overlap_thresh,
            match_thresh: d.match_thresh,
            max_age: d.max_age,
            stride: d.stride,
            linked_embeddings: d.linked_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: TaskMode,
    pub seed: u64,
    /// Frames per training subclip.
    pub subclip_size: usize,
    /// Frames per inference window.
    pub window: usize,
    /// Largest index gap between the two subclips of a training pair.
    pub pair_radius: usize,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub assign: AssignConfig,
    pub tracker: TrackerConfig,
    pub optimizer: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            mode: t.mode,
            seed: t.seed,
            subclip_size: t.subclip_size,
            window: InferenceConfig::default().window,
            pair_radius: t.pair_radius,
            model: ModelConfig::default(),
            loss: t.loss,
            assign: t.assign,
            tracker: TrackerConfig::default(),
            optimizer: t.optim,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.inference_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            subclip_size: self.subclip_size,
            pair_radius: self.pair_radius,
            loss: self.loss,
            assign: self.assign,
            optim: self.optimizer.clone(),
            seed: self.seed,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        let t = &self.tracker;
        InferenceConfig {
            window: self.window,
            stride: t.stride,
            score_thresh: t.score_thresh,
            overlap_thresh: t.overlap_thresh,
            match_thresh: t.match_thresh,
            max_age: t.max_age,
            mode: self.mode,
            linked_embeddings: t.linked_embeddings,
        }
    }
}
