use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamInit, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::{Padding, Scalar, Tensor, Var};

use super::spectral::{spectral_normalize, PowerState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub negative_slope: f64,
    /// Power-iteration steps per training forward pass.
    pub power_iterations: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            negative_slope: 0.2,
            power_iterations: 1,
        }
    }
}

const LEVELS: usize = 3;

/// UNet discriminator producing per-pixel realness logits. Every convolution
/// weight is spectrally normalized at use; convolutions carry no bias.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    /// `(name, out, in, stride)` in forward order.
    convs: Vec<(String, usize, usize, usize)>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be >= 1".into()));
        }
        let b = config.base_channels;
        let mut convs = vec![("d.in".to_string(), b, 3, 1)];
        for l in 0..LEVELS {
            convs.push((format!("d.down{l}"), b << (l + 1), b << l, 2));
        }
        for l in (0..LEVELS).rev() {
            convs.push((format!("d.up{l}"), b << l, b << (l + 1), 1));
        }
        convs.push(("d.post0".into(), b, b, 1));
        convs.push(("d.post1".into(), b, b, 1));
        convs.push(("d.out".into(), 1, b, 1));
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, seed);
        for (name, o, c, _) in &self.convs {
            init.conv(name, *o, *c, 3, 3, false);
        }
        store
    }

    /// Fresh power-iteration vectors, one per convolution.
    pub fn init_power(&self, seed: u64) -> SpectralState {
        SpectralState {
            vectors: self
                .convs
                .iter()
                .enumerate()
                .map(|(i, (name, o, c, _))| {
                    (name.clone(), PowerState::new(*o, c * 9, derive_seed(seed, i as u64)))
                })
                .collect(),
        }
    }

    /// Logits `[N, 1, H, W]`. Advances the power iteration in `state`.
    pub fn forward<T: Scalar>(&self, img: &Var<T>, p: &Bound<T>, state: &mut SpectralState) -> Result<Var<T>> {
        self.forward_with(img, p, state, self.config.power_iterations)
    }

    /// Logits with the power-iteration vectors held fixed.
    pub fn forward_frozen<T: Scalar>(&self, img: &Var<T>, p: &Bound<T>, state: &SpectralState) -> Result<Var<T>> {
        self.forward_with(img, p, &mut state.clone(), 0)
    }

    fn forward_with<T: Scalar>(
        &self,
        img: &Var<T>,
        p: &Bound<T>,
        state: &mut SpectralState,
        iters: usize,
    ) -> Result<Var<T>> {
        let [_, c, h, w] = img.value().dims4()?;
        if c != 3 {
            return Err(Error::shape("discriminator", "input channels", format!("expected 3, got {c}")));
        }
        let m = 1 << LEVELS;
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let x = if ph + pw > 0 {
            img.pad_reflect(0, ph, 0, pw)?
        } else {
            img.clone()
        };
        let slope = T::lit(self.config.negative_slope);
        let mut conv = |x: &Var<T>, idx: usize| -> Result<Var<T>> {
            let (name, _, _, stride) = &self.convs[idx];
            let u = state
                .vectors
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(format!("power state for {name}")))?;
            let weight = spectral_normalize(p.get(&format!("{name}.weight"))?, u, iters)?;
            x.conv2d(&weight, None, *stride, Padding::reflect(1))
        };

        let mut feats = vec![conv(&x, 0)?.leaky_relu(slope)];
        for l in 0..LEVELS {
            let next = conv(&feats[l], 1 + l)?.leaky_relu(slope);
            feats.push(next);
        }
        let mut y = feats.pop().expect("deepest feature");
        for (i, skip) in feats.iter().rev().enumerate() {
            let [_, _, sh, sw] = skip.value().dims4()?;
            let up = y.bicubic_resize(sh, sw, false)?;
            y = conv(&up, 1 + LEVELS + i)?.leaky_relu(slope).add(skip)?;
        }
        let n = self.convs.len();
        y = conv(&y, n - 3)?.leaky_relu(slope);
        y = conv(&y, n - 2)?.leaky_relu(slope);
        y = conv(&y, n - 1)?;
        if ph + pw > 0 {
            y = y.crop(0, 0, h, w)?;
        }
        Ok(y)
    }
}

/// Power-iteration vectors of every spectrally normalized weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpectralState {
    pub vectors: BTreeMap<String, PowerState>,
}

impl SpectralState {
    /// Entries `<prefix><conv>.u` and `<prefix><conv>.v` for checkpointing.
    pub fn write_to(&self, store: &mut ParamStore<f32>, prefix: &str) {
        let vector = |v: &[f64]| Tensor::new(&[v.len()], v.iter().map(|&x| x as f32).collect()).expect("nonempty");
        for (name, s) in &self.vectors {
            store.insert(format!("{prefix}{name}.u"), vector(&s.u));
            store.insert(format!("{prefix}{name}.v"), vector(&s.v));
        }
    }

    pub fn read_from(store: &ParamStore<f32>, prefix: &str) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for (n, t) in store.iter() {
            let Some(name) = n.strip_prefix(prefix).and_then(|r| r.strip_suffix(".u")) else {
                continue;
            };
            let v = store
                .get(&format!("{prefix}{name}.v"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}.v")))?;
            let widen = |t: &Tensor<f32>| t.data().iter().map(|&x| x as f64).collect();
            vectors.insert(
                name.to_string(),
                PowerState {
                    u: widen(t),
                    v: widen(v),
                },
            );
        }
        Ok(Self { vectors })
    }
}
