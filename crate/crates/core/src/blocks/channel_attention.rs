use crate::error::Result;
use crate::params::{Bound, ParamInit};
use crate::tensor::{Padding, Scalar, Var};

/// Squeeze-and-excitation style channel gate:
/// `y = x * sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    prefix: String,
    channels: usize,
    reduced: usize,
}

impl ChannelAttention {
    /// Bottleneck width is `channels / reduction`, at least 1.
    pub fn new(prefix: impl Into<String>, channels: usize, reduction: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            reduced: (channels / reduction.max(1)).max(1),
        }
    }

    pub fn reduced_channels(&self) -> usize {
        self.reduced
    }

    pub fn init<T: Scalar>(&self, init: &mut ParamInit<'_, T>) {
        init.conv(&format!("{}.reduce", self.prefix), self.reduced, self.channels, 1, 1, true);
        init.conv(&format!("{}.expand", self.prefix), self.channels, self.reduced, 1, 1, true);
    }

    /// The per-channel gate `s`, shape `[N, C, 1, 1]`.
    pub fn gate<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<Var<T>> {
        let pooled = x.global_avg_pool()?;
        let hidden = p
            .conv(&pooled, &format!("{}.reduce", self.prefix), 1, Padding::NONE)?
            .relu();
        Ok(p
            .conv(&hidden, &format!("{}.expand", self.prefix), 1, Padding::NONE)?
            .sigmoid())
    }

    pub fn forward<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<Var<T>> {
        let s = self.gate(x, p)?;
        x.mul_channel(&s)
    }
}
