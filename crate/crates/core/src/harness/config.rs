use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at whose start the learning rate is multiplied by 0.1.
    pub lr_steps: Vec<usize>,
    /// Linear ramp from `lr / 3` over the first iterations.
    pub warmup_iters: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_steps: vec![],
            warmup_iters: 0,
            clip_grad_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: usize, iteration: usize) -> f64 {
        let steps = self.lr_steps.iter().filter(|&&s| epoch >= s).count();
        let mut lr = self.lr * 0.1f64.powi(steps as i32);
        if iteration < self.warmup_iters {
            let a = iteration as f64 / self.warmup_iters as f64;
            lr *= 1.0 / 3.0 + a * 2.0 / 3.0;
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    pub dataset: SceneSpec,
    /// Training scenes are indices `0..train_images`.
    pub train_images: usize,
    /// Held-out scenes start at `eval_offset`.
    pub eval_images: usize,
    pub eval_offset: u64,
    pub rpn_recalibrate: bool,
    /// Horizontal flip with probability 0.5.
    pub hflip: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            seed: 0,
            dataset: SceneSpec::default(),
            train_images: 64,
            eval_images: 64,
            eval_offset: 1_000_000,
            rpn_recalibrate: false,
            hflip: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.head.validate()?;
        if self.model.head.num_classes != self.dataset.classes {
            return Err(Error::Config(format!(
                "model.head.num_classes {} != dataset.classes {}",
                self.model.head.num_classes, self.dataset.classes
            )));
        }
        let (h, w) = self.dataset.image_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image_size {h}x{w} must be divisible by 32")));
        }
        if self.train_images == 0 {
            return Err(Error::Config("train_images must be positive".into()));
        }
        Ok(())
    }

    /// Model config with the experiment-level switches applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.rpn.recalibrate = self.rpn_recalibrate;
        m
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{AttentionVariant, HeadMode};

    #[test]
    fn json_round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.head.mode = HeadMode::Lightweight;
        cfg.model.head.variant = AttentionVariant::ConvFc1Fc2;
        cfg.model.head.pool_size = (24, 32);
        cfg.optimizer.lr_steps = vec![20, 26];
        cfg.optimizer.lr = 0.123456789012345;
        cfg.rpn_recalibrate = true;
        cfg.dataset.seed = u64::MAX;
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.model_config().rpn.recalibrate);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"epochs": 2, "epoch": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": {"head": {"reduction": 8, "ratio": 2}}}"#).is_err());
        let ok = ExperimentConfig::from_json(r#"{"epochs": 2, "model": {"head": {"mode": "baseline"}}}"#).unwrap();
        assert_eq!(ok.epochs, 2);
        assert_eq!(ok.model.head.mode, HeadMode::Baseline);
    }

    #[test]
    fn mismatched_class_counts_fail_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.head.num_classes = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn step_schedule() {
        let o = OptimizerConfig {
            lr: 1.0,
            lr_steps: vec![2, 4],
            warmup_iters: 10,
            ..OptimizerConfig::default()
        };
        assert!((o.lr_at(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(o.lr_at(1, 10), 1.0);
        assert!((o.lr_at(2, 50) - 0.1).abs() < 1e-15);
        assert!((o.lr_at(5, 99) - 0.01).abs() < 1e-15);
    }
}
