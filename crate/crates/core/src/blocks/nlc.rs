use serde::{Deserialize, Serialize};

use super::attention::{AttentionKind, NonLocalAttention, SparseAttentionConfig};
use super::channel_attention::ChannelAttention;
use super::gdfn::Gdfn;
use super::layer_norm;
use crate::error::Result;
use crate::params::{Bound, ParamInit};
use crate::tensor::{concat_channels, AttentionStats, Padding, Scalar, Var};

/// Hyperparameters shared by every NLC block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlcOptions {
    pub attention: AttentionKind,
    pub sparse: SparseAttentionConfig,
    pub use_layernorm: bool,
    pub use_gdfn: bool,
    /// GELU between the two depth-wise convolutions of the local branch.
    pub local_activation: bool,
    pub ca_reduction: usize,
    pub gdfn_expansion: f64,
}

impl Default for NlcOptions {
    fn default() -> Self {
        Self {
            attention: AttentionKind::Sparse,
            sparse: SparseAttentionConfig::default(),
            use_layernorm: true,
            use_gdfn: true,
            local_activation: false,
            ca_reduction: 16,
            gdfn_expansion: 2.0,
        }
    }
}

/// Non-local, local and channel branch block:
///
/// `y = CA(Fuse1x1([NLSA(LN(x)), DW(DW(LN(x)))])) + x`, followed by a GDFN
/// when enabled.
#[derive(Clone, Debug)]
pub struct NlcBlock {
    prefix: String,
    channels: usize,
    options: NlcOptions,
    attention: NonLocalAttention,
    channel_attention: ChannelAttention,
    gdfn: Option<Gdfn>,
}

impl NlcBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, options: NlcOptions) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self {
            attention: NonLocalAttention::new(
                format!("{prefix}.attn"),
                channels,
                options.attention,
                options.sparse,
            )?,
            channel_attention: ChannelAttention::new(format!("{prefix}.ca"), channels, options.ca_reduction),
            gdfn: options.use_gdfn.then(|| {
                Gdfn::new(
                    format!("{prefix}.gdfn"),
                    channels,
                    options.gdfn_expansion,
                    options.use_layernorm,
                )
            }),
            prefix,
            channels,
            options,
        })
    }

    pub fn init<T: Scalar>(&self, init: &mut ParamInit<'_, T>) {
        let (c, pre) = (self.channels, &self.prefix);
        if self.options.use_layernorm {
            init.ones(&format!("{pre}.norm.gamma"), &[c]);
            init.zeros(&format!("{pre}.norm.beta"), &[c]);
        }
        self.attention.init(init);
        init.conv(&format!("{pre}.dw1"), c, 1, 3, 3, false);
        init.conv(&format!("{pre}.dw2"), c, 1, 3, 3, false);
        init.conv(&format!("{pre}.fuse"), c, 2 * c, 1, 1, true);
        self.channel_attention.init(init);
        if let Some(g) = &self.gdfn {
            g.init(init);
        }
    }

    pub fn forward<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<Var<T>> {
        self.forward_with_stats(x, p).map(|(y, _)| y)
    }

    pub fn forward_with_stats<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<(Var<T>, AttentionStats)> {
        let pre = &self.prefix;
        let normed = if self.options.use_layernorm {
            layer_norm(x, p, &format!("{pre}.norm"))?
        } else {
            x.clone()
        };
        let (global, stats) = self.attention.forward_with_stats(&normed, p)?;
        let mut local = normed.depthwise_conv2d(p.get(&format!("{pre}.dw1.weight"))?, Padding::reflect(1))?;
        if self.options.local_activation {
            local = local.gelu();
        }
        let local = local.depthwise_conv2d(p.get(&format!("{pre}.dw2.weight"))?, Padding::reflect(1))?;
        let fused = p.conv(&concat_channels(&[&global, &local])?, &format!("{pre}.fuse"), 1, Padding::NONE)?;
        let y = self.channel_attention.forward(&fused, p)?.add(x)?;
        let y = match &self.gdfn {
            Some(g) => g.forward(&y, p)?,
            None => y,
        };
        Ok((y, stats))
    }
}
