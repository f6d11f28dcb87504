//! Building blocks of the generator: channel attention, the gated
//! feed-forward block, non-local attention and the NLC block that combines
//! them.

mod attention;
mod channel_attention;
mod gdfn;
mod nlc;

pub use attention::{AttentionKind, NonLocalAttention, SparseAttentionConfig, DENSE_MAX_TOKENS};
pub use channel_attention::ChannelAttention;
pub use gdfn::Gdfn;
pub use nlc::{NlcBlock, NlcOptions};

use crate::error::Result;
use crate::params::Bound;
use crate::tensor::{Scalar, Var};

pub const LN_EPS: f64 = 1e-6;

pub(crate) fn layer_norm<T: Scalar>(x: &Var<T>, p: &Bound<T>, name: &str) -> Result<Var<T>> {
    x.layernorm_channels(
        p.get(&format!("{name}.gamma"))?,
        p.get(&format!("{name}.beta"))?,
        T::lit(LN_EPS),
    )
}
