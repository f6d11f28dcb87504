use serde::{Deserialize, Serialize};

use crate::data::{make_training_pair, rgb_to_ycbcr_y, CropPolicy, ImageRecord};
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::metrics::{psnr, shave};
use crate::model::Generator;
use crate::params::ParamStore;
use crate::rng::derive_seed;
use crate::tensor::{Tape, Tensor};

/// Fixed `(lr [1, 3, h, w], hr [1, 3, h*s, w*s])` pairs.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub pairs: Vec<(Tensor<f32>, Tensor<f32>)>,
    /// Pixels shaved from each HR border before PSNR.
    pub border: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    /// Mean absolute RGB error.
    pub l1: f64,
    /// Mean Y-channel PSNR (dB).
    pub psnr: f64,
}

impl ValidationSet {
    /// `count` patches drawn from `records` by a stream disjoint from the
    /// training draws.
    pub fn sample(
        records: &[ImageRecord],
        policy: &CropPolicy,
        spec: &DegradationSpec,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("validation needs at least one image".into()));
        }
        let policy = CropPolicy {
            seed: derive_seed(seed, 0x7661_6c69),
            augment: false,
            ..*policy
        };
        let pairs = (0..count)
            .map(|k| {
                let item_spec = spec.with_seed(derive_seed(policy.seed, k as u64));
                let (lr, hr) = make_training_pair(&records[k % records.len()], &policy, &item_spec, k as u64)?;
                let (ls, hs) = (batch1(lr.shape()), batch1(hr.shape()));
                Ok((lr.reshape(&ls)?, hr.reshape(&hs)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            pairs,
            border: spec.scale,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn batch1(shape: &[usize]) -> Vec<usize> {
    std::iter::once(1).chain(shape.iter().copied()).collect()
}

/// Super-resolves one `[1, 3, h, w]` input with frozen parameters.
pub fn super_resolve(generator: &Generator, params: &ParamStore<f32>, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let x = tape.constant(lr.clone());
    Ok(generator.forward(&x, &p)?.value().clone())
}

pub fn validate(generator: &Generator, params: &ParamStore<f32>, set: &ValidationSet) -> Result<ValidationResult> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let (mut l1, mut db) = (0.0, 0.0);
    for (lr, hr) in &set.pairs {
        let sr = super_resolve(generator, params, lr)?;
        l1 += sr
            .data()
            .iter()
            .zip(hr.data())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>()
            / sr.numel() as f64;
        let ys = shave(&rgb_to_ycbcr_y(&sr.map(|v| v.clamp(0.0, 1.0)))?, set.border)?;
        let yh = shave(&rgb_to_ycbcr_y(hr)?, set.border)?;
        db += psnr(&ys, &yh)?;
    }
    let n = set.len() as f64;
    Ok(ValidationResult {
        l1: l1 / n,
        psnr: db / n,
    })
}
