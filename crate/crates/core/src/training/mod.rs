//! Optimization: Adam, the learning-rate schedule, the loss combiner and the
//! two training stages.
//!
//! Every batch is a pure function of `(seed, iteration)`, so a run resumed
//! from a checkpoint replays the uninterrupted run bit for bit.

mod adam;
mod config;
mod loss;
mod trainer;
mod validation;

pub use adam::{adam_step, check_gradients, clip_gradients, AdamState};
pub use config::{lr_schedule, AdamConfig, LossWeights, Stage, TrainConfig};
pub use loss::{
    combine, discriminator_loss, generator_adversarial_loss, perceptual_loss, total_loss, FeatureExtractor,
    LossComponents, PERCEPTUAL_STAGE_WEIGHTS,
};
pub use trainer::{
    discriminator_accuracy, train_gan_stage, train_psnr_stage, GanState, PsnrState, StepRecord, TrainContext,
    TrainData, CHECKPOINT_FILE, LOG_FILE,
};
pub use validation::{super_resolve, validate, ValidationResult, ValidationSet};
