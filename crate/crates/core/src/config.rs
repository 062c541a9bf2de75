//! Experiment configuration, loadable from JSON with defaults for every
//! omitted field.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::ensemble::FusionConfig;
use crate::error::{Error, Result};
use crate::experts::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_clips: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub clip: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_clips: 72, seed: 0, clip: SynthSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    /// Defaults to 1e-4 in stage 1 and 1e-5 in stage 2.
    pub lr_decoder: Option<f64>,
    pub lr_lora: f64,
    /// Defaults to 4 in stage 1 and 1 in stage 2.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub val_fraction: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub optimizer: AdamWConfig,
    /// Evaluate on the held-out split after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 20,
            lr_decoder: None,
            lr_lora: 1e-4,
            batch_size: None,
            seed: 0,
            val_fraction: 0.1,
            lora_rank: 4,
            lora_alpha: 8.0,
            optimizer: AdamWConfig::default(),
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: u8) -> Self {
        Self { stage, ..Self::default() }
    }

    pub fn lr_decoder(&self) -> f64 {
        self.lr_decoder.unwrap_or(if self.stage == 1 { 1e-4 } else { 1e-5 })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.stage == 1 { 4 } else { 1 })
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        let lrs = [self.lr_decoder(), self.lr_lora];
        if lrs.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument(format!("learning rates must be positive, got {lrs:?}")));
        }
        if self.batch_size() == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        let c = &self.data.clip;
        if (c.h, c.w) != (self.model.height, self.model.width) || c.patch != self.model.backbone.patch {
            return Err(Error::InvalidArgument(format!(
                "data clips are {}x{} (patch {}) but the model expects {}x{} (patch {})",
                c.h, c.w, c.patch, self.model.height, self.model.width, self.model.backbone.patch
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_stage() {
        let s1 = TrainConfig::for_stage(1);
        assert_eq!((s1.lr_decoder(), s1.batch_size(), s1.epochs), (1e-4, 4, 20));
        let s2 = TrainConfig::for_stage(2);
        assert_eq!((s2.lr_decoder(), s2.lr_lora, s2.batch_size()), (1e-5, 1e-4, 1));
        assert!(TrainConfig::for_stage(3).validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = Config::from_json(r#"{"data":{"n_clips":8,"T":4},"train":{"epochs":2},"fusion":{"mode":"saliency"}}"#)
            .unwrap();
        assert_eq!(c.data.n_clips, 8);
        assert_eq!(c.data.clip.t, 4);
        assert_eq!(c.data.clip.h, 32);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.model.expert.c_d, 32);
        assert_eq!(c.fusion.weights, vec![0.5, 0.5]);
        c.validate().unwrap();
        assert!(Config::from_json("{\"train\":{\"epochs\":\"x\"}}").is_err());
        let round = Config::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn mismatched_geometry_is_rejected() {
        let mut c = Config::default();
        c.data.clip.h = 16;
        assert!(c.validate().is_err());
    }
}
