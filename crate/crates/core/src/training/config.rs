use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DiscriminatorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// L1 (plus optional perceptual) pretraining.
    Psnr,
    /// Adversarial fine-tuning from a PSNR checkpoint.
    Gan,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub perc: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perc: 1.0,
            adv: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Last iteration (exclusive) of the stage.
    pub iterations: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub psnr_lr: f64,
    pub gan_lr: f64,
    /// PSNR stage: the learning rate halves every `decay_every` iterations.
    pub decay_every: u64,
    pub weights: LossWeights,
    /// Validation cadence; `0` disables periodic validation.
    pub validate_every: u64,
    /// Held-out patches drawn when no validation set is supplied.
    pub validation_size: usize,
    /// Checkpoint cadence; `0` checkpoints only at the end.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; off unless set.
    pub clip_grad_norm: Option<f64>,
    pub discriminator: DiscriminatorConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Psnr,
            iterations: 1_200_000,
            batch: 4,
            adam: AdamConfig::default(),
            psnr_lr: 4e-4,
            gan_lr: 1e-4,
            decay_every: 300_000,
            weights: LossWeights::default(),
            validate_every: 1000,
            validation_size: 8,
            checkpoint_every: 1000,
            clip_grad_norm: None,
            discriminator: DiscriminatorConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let AdamConfig { beta1, beta2, eps } = self.adam;
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("adam.{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return bad(format!("adam.eps must be positive, got {eps}"));
        }
        let LossWeights { l1, perc, adv } = self.weights;
        for (name, w) in [("l1", l1), ("perc", perc), ("adv", adv)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("weights.{name} must be nonnegative, got {w}"));
            }
        }
        for (name, lr) in [("psnr_lr", self.psnr_lr), ("gan_lr", self.gan_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.decay_every == 0 {
            return bad("decay_every must be >= 1".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Learning rate at `iteration`: step-halving in the PSNR stage, constant in
/// the GAN stage.
pub fn lr_schedule(config: &TrainConfig, iteration: u64) -> f64 {
    match config.stage {
        Stage::Psnr => {
            let halvings = (iteration / config.decay_every).min(i32::MAX as u64) as i32;
            config.psnr_lr * 0.5f64.powi(halvings)
        }
        Stage::Gan => config.gan_lr,
    }
}
