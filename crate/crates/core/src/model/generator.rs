use crate::blocks::NlcBlock;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamInit, ParamStore};
use crate::tensor::{concat_channels, AttentionStats, Padding, Scalar, Var};

use super::ModelConfig;

/// The super-resolution network.
///
/// Stem 3x3 conv, a Unet of NLC blocks (strided-conv downsampling, pixel
/// shuffle upsampling, concatenated skips fused by 1x1 convs), a pixel
/// shuffle tail to the target scale and a 3x3 conv to RGB. With the bicubic
/// skip the network predicts a residual over the bicubic upsample.
#[derive(Clone, Debug)]
pub struct Generator {
    config: ModelConfig,
    encoder: Vec<Vec<NlcBlock>>,
    bottleneck: Vec<NlcBlock>,
    /// Indexed by level, deepest first is `decoder[levels - 2]`.
    decoder: Vec<Vec<NlcBlock>>,
}

fn stage(prefix: &str, count: usize, channels: usize, config: &ModelConfig) -> Result<Vec<NlcBlock>> {
    (0..count)
        .map(|i| NlcBlock::new(format!("{prefix}.{i}"), channels, config.block_options()))
        .collect()
}

/// Pixel-shuffle factors of the tail.
fn tail_factors(scale: usize) -> &'static [usize] {
    match scale {
        2 => &[2],
        3 => &[3],
        _ => &[2, 2],
    }
}

impl Generator {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.blocks_per_level;
        if !config.use_unet {
            return Ok(Self {
                bottleneck: stage("body", n * config.unet_levels, config.base_channels, &config)?,
                encoder: Vec::new(),
                decoder: Vec::new(),
                config,
            });
        }
        let last = config.unet_levels - 1;
        let encoder = (0..last)
            .map(|l| stage(&format!("enc{l}"), n, config.channels_at(l), &config))
            .collect::<Result<_>>()?;
        let decoder = (0..last)
            .map(|l| stage(&format!("dec{l}"), n, config.channels_at(l), &config))
            .collect::<Result<_>>()?;
        Ok(Self {
            bottleneck: stage("mid", n, config.channels_at(last), &config)?,
            encoder,
            decoder,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters. With the bicubic skip on, the RGB conv starts at zero
    /// so the untrained network is exactly the bicubic upsampler.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let cfg = &self.config;
        let base = cfg.base_channels;
        {
            let mut init = ParamInit::new(&mut store, seed);
            init.conv("stem", base, 3, 3, 3, true);
            for (l, blocks) in self.encoder.iter().enumerate() {
                blocks.iter().for_each(|b| b.init(&mut init));
                init.conv(&format!("down{l}"), cfg.channels_at(l + 1), cfg.channels_at(l), 3, 3, true);
            }
            self.bottleneck.iter().for_each(|b| b.init(&mut init));
            for (l, blocks) in self.decoder.iter().enumerate().rev() {
                let c = cfg.channels_at(l);
                init.conv(&format!("up{l}"), 4 * c, cfg.channels_at(l + 1), 1, 1, true);
                init.conv(&format!("skip{l}"), c, 2 * c, 1, 1, true);
                blocks.iter().for_each(|b| b.init(&mut init));
            }
            for (i, &r) in tail_factors(cfg.scale).iter().enumerate() {
                init.conv(&format!("tail.up{i}"), base * r * r, base, 3, 3, true);
            }
            init.conv("tail.rgb", 3, base, 3, 3, true);
        }
        if cfg.use_bicubic_skip {
            zero_tail(&mut store);
        }
        store
    }

    /// Number of scalar parameters; depends only on the configuration.
    pub fn param_count(&self) -> usize {
        self.init::<f32>(0).num_scalars()
    }

    pub fn forward<T: Scalar>(&self, lr: &Var<T>, p: &Bound<T>) -> Result<Var<T>> {
        self.forward_with_stats(lr, p).map(|(y, _)| y)
    }

    pub fn forward_with_stats<T: Scalar>(&self, lr: &Var<T>, p: &Bound<T>) -> Result<(Var<T>, AttentionStats)> {
        let [_, c, h, w] = lr.value().dims4()?;
        if c != 3 {
            return Err(Error::shape("generator", "input channels", format!("expected 3, got {c}")));
        }
        let mut stats = AttentionStats::default();
        let mut run = |x: Var<T>, blocks: &[NlcBlock]| -> Result<Var<T>> {
            blocks.iter().try_fold(x, |x, b| {
                let (y, s) = b.forward_with_stats(&x, p)?;
                stats.merge(s);
                Ok(y)
            })
        };

        let m = self.config.size_multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let x = if ph + pw > 0 {
            lr.pad_reflect(0, ph, 0, pw)?
        } else {
            lr.clone()
        };
        let mut feat = p.conv(&x, "stem", 1, Padding::reflect(1))?;
        let mut skips = Vec::new();
        for (l, blocks) in self.encoder.iter().enumerate() {
            feat = run(feat, blocks)?;
            skips.push(feat.clone());
            feat = p.conv(&feat, &format!("down{l}"), 2, Padding::reflect(1))?;
        }
        feat = run(feat, &self.bottleneck)?;
        for (l, blocks) in self.decoder.iter().enumerate().rev() {
            let up = p.conv(&feat, &format!("up{l}"), 1, Padding::NONE)?.pixel_shuffle(2)?;
            let joined = concat_channels(&[&up, &skips[l]])?;
            feat = run(p.conv(&joined, &format!("skip{l}"), 1, Padding::NONE)?, blocks)?;
        }
        if ph + pw > 0 {
            feat = feat.crop(0, 0, h, w)?;
        }
        for (i, &r) in tail_factors(self.config.scale).iter().enumerate() {
            feat = p.conv(&feat, &format!("tail.up{i}"), 1, Padding::reflect(1))?.pixel_shuffle(r)?;
        }
        let mut out = p.conv(&feat, "tail.rgb", 1, Padding::reflect(1))?;
        if self.config.use_bicubic_skip {
            let s = self.config.scale;
            out = out.add(&lr.bicubic_resize(h * s, w * s, true)?)?;
        }
        Ok((out, stats))
    }
}

/// Zeroes the final RGB conv.
pub fn zero_tail<T: Scalar>(store: &mut ParamStore<T>) {
    for name in ["tail.rgb.weight", "tail.rgb.bias"] {
        if let Some(t) = store.get_mut(name) {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
