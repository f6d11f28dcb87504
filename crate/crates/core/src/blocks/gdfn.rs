use crate::error::Result;
use crate::params::{Bound, ParamInit};
use crate::tensor::{Padding, Scalar, Var};

use super::layer_norm;

/// Gated depth-wise-convolution feed-forward block:
/// `y = x + Wp (gelu(DW(X1)) * DW(X2))`, `[X1, X2] = chunk(We LN(x))`.
#[derive(Clone, Debug)]
pub struct Gdfn {
    prefix: String,
    channels: usize,
    hidden: usize,
    use_layernorm: bool,
}

impl Gdfn {
    pub fn new(prefix: impl Into<String>, channels: usize, expansion: f64, use_layernorm: bool) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            hidden: ((channels as f64 * expansion).round() as usize).max(1),
            use_layernorm,
        }
    }

    /// Width of each gated half.
    pub fn hidden_channels(&self) -> usize {
        self.hidden
    }

    pub fn init<T: Scalar>(&self, init: &mut ParamInit<'_, T>) {
        let (c, h, pre) = (self.channels, self.hidden, &self.prefix);
        if self.use_layernorm {
            init.ones(&format!("{pre}.norm.gamma"), &[c]);
            init.zeros(&format!("{pre}.norm.beta"), &[c]);
        }
        init.conv(&format!("{pre}.expand"), 2 * h, c, 1, 1, false);
        init.conv(&format!("{pre}.dw"), 2 * h, 1, 3, 3, false);
        init.conv(&format!("{pre}.project"), c, h, 1, 1, false);
    }

    pub fn forward<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<Var<T>> {
        let pre = &self.prefix;
        let normed = if self.use_layernorm {
            layer_norm(x, p, &format!("{pre}.norm"))?
        } else {
            x.clone()
        };
        let expanded = p.conv(&normed, &format!("{pre}.expand"), 1, Padding::NONE)?;
        let dw = expanded.depthwise_conv2d(p.get(&format!("{pre}.dw.weight"))?, Padding::reflect(1))?;
        let halves = dw.chunk_channels(2)?;
        let gated = halves[0].gelu().mul(&halves[1])?;
        let out = p.conv(&gated, &format!("{pre}.project"), 1, Padding::NONE)?;
        x.add(&out)
    }
}
