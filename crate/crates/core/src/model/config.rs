use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionKind, NlcOptions, SparseAttentionConfig};
use crate::error::{Error, Result};

/// Generator architecture and its ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub unet_levels: usize,
    pub blocks_per_level: usize,
    pub scale: usize,
    pub use_layernorm: bool,
    pub use_bicubic_skip: bool,
    pub use_gdfn: bool,
    /// `false` replaces the pyramid by a flat stack of
    /// `blocks_per_level * unet_levels` blocks at `base_channels`.
    pub use_unet: bool,
    pub attention: AttentionKind,
    pub sparse: SparseAttentionConfig,
    pub local_activation: bool,
    pub ca_reduction: usize,
    pub gdfn_expansion: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            unet_levels: 3,
            blocks_per_level: 2,
            scale: 4,
            use_layernorm: true,
            use_bicubic_skip: true,
            use_gdfn: true,
            use_unet: true,
            attention: AttentionKind::Sparse,
            sparse: SparseAttentionConfig::default(),
            local_activation: false,
            ca_reduction: 16,
            gdfn_expansion: 2.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments: 16 base channels, two
    /// levels, one block per level.
    pub fn tiny(scale: usize) -> Self {
        Self {
            base_channels: 16,
            unet_levels: 2,
            blocks_per_level: 1,
            scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::Config(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.unet_levels == 0 {
            return Err(Error::Config("unet_levels must be >= 1".into()));
        }
        if self.base_channels == 0 || self.blocks_per_level == 0 {
            return Err(Error::Config("base_channels and blocks_per_level must be >= 1".into()));
        }
        if self.unet_levels > 8 {
            return Err(Error::Config("unet_levels above 8 is not supported".into()));
        }
        if self.ca_reduction == 0 || !(self.gdfn_expansion > 0.0) {
            return Err(Error::Config("ca_reduction and gdfn_expansion must be positive".into()));
        }
        self.sparse.validate()
    }

    pub(crate) fn block_options(&self) -> NlcOptions {
        NlcOptions {
            attention: self.attention,
            sparse: self.sparse,
            use_layernorm: self.use_layernorm,
            use_gdfn: self.use_gdfn,
            local_activation: self.local_activation,
            ca_reduction: self.ca_reduction,
            gdfn_expansion: self.gdfn_expansion,
        }
    }

    /// Channel width at pyramid level `level`.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial multiple the pyramid needs; inputs are reflect-padded to it.
    pub fn size_multiple(&self) -> usize {
        if self.use_unet {
            1 << (self.unet_levels - 1)
        } else {
            1
        }
    }
}
