//! The generator, the spectrally normalized discriminator and checkpoints.

mod checkpoint;
mod config;
mod discriminator;
mod generator;
mod spectral;

pub use checkpoint::{config_path, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use discriminator::{Discriminator, DiscriminatorConfig, SpectralState};
pub use generator::{zero_tail, Generator};
pub use spectral::{power_iteration, spectral_normalize, PowerState, SIGMA_FLOOR};

use std::path::Path;

use crate::error::Result;

/// Saves a generator checkpoint together with its configuration sidecar.
pub fn save_generator(path: &Path, config: &ModelConfig, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.save(path)?;
    std::fs::write(config_path(path), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

/// Loads a checkpoint and its configuration sidecar.
pub fn load_generator(path: &Path) -> Result<(ModelConfig, Checkpoint)> {
    let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
    config.validate()?;
    Ok((config, Checkpoint::load(path)?))
}
