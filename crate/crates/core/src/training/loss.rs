use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

use super::config::LossWeights;

/// Per-stage weights of the perceptual term.
pub const PERCEPTUAL_STAGE_WEIGHTS: [f64; 5] = [0.1, 0.1, 1.0, 1.0, 1.0];

/// Feature network for the perceptual term. Must return one map per entry of
/// [`PERCEPTUAL_STAGE_WEIGHTS`].
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, img: &Var<T>) -> Result<Vec<Var<T>>>;
}

/// Loss terms of one step. `total` is the optimized value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub perc: f64,
    pub adv: f64,
    pub total: f64,
}

/// `w_l1 L1 + w_perc L_perc + w_adv L_adv`.
pub fn combine(w: &LossWeights, l1: f64, perc: f64, adv: f64) -> f64 {
    w.l1 * l1 + w.perc * perc + w.adv * adv
}

/// Weighted mean absolute feature difference over the extractor's stages.
pub fn perceptual_loss<T: Scalar>(sr: &Var<T>, hr: &Var<T>, extractor: &dyn FeatureExtractor<T>) -> Result<Var<T>> {
    let fs = extractor.features(sr)?;
    let fh = extractor.features(hr)?;
    if fs.len() != PERCEPTUAL_STAGE_WEIGHTS.len() || fh.len() != fs.len() {
        return Err(Error::Config(format!(
            "feature extractor returned {} stages, expected {}",
            fs.len(),
            PERCEPTUAL_STAGE_WEIGHTS.len()
        )));
    }
    let mut acc: Option<Var<T>> = None;
    for ((a, b), w) in fs.iter().zip(&fh).zip(PERCEPTUAL_STAGE_WEIGHTS) {
        let term = a.l1_distance(b)?.scale(T::lit(w));
        acc = Some(match acc {
            Some(s) => s.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("five stages"))
}

/// Non-saturating generator loss `mean softplus(-D(sr))`.
pub fn generator_adversarial_loss<T: Scalar>(fake_logits: &Var<T>) -> Var<T> {
    fake_logits.scale(T::lit(-1.0)).softplus().mean()
}

/// Per-pixel binary cross-entropy on logits:
/// `mean softplus(-D(hr)) + mean softplus(D(sr))`.
pub fn discriminator_loss<T: Scalar>(real_logits: &Var<T>, fake_logits: &Var<T>) -> Result<Var<T>> {
    real_logits
        .scale(T::lit(-1.0))
        .softplus()
        .mean()
        .add(&fake_logits.softplus().mean())
}

/// Generator objective. The perceptual term is skipped without an extractor
/// and the adversarial term without logits; zero-weight terms are still
/// evaluated so they can be logged.
pub fn total_loss<T: Scalar>(
    sr: &Var<T>,
    hr: &Var<T>,
    disc_logits: Option<&Var<T>>,
    extractor: Option<&dyn FeatureExtractor<T>>,
    weights: &LossWeights,
) -> Result<(Var<T>, LossComponents)> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape(
            "total_loss",
            "shape",
            format!("{:?} vs {:?}", sr.shape(), hr.shape()),
        ));
    }
    let l1 = sr.l1_distance(hr)?;
    let mut comps = LossComponents {
        l1: l1.value().data()[0].as_f64(),
        ..Default::default()
    };
    let mut total = l1.scale(T::lit(weights.l1));
    if let Some(ext) = extractor {
        let perc = perceptual_loss(sr, hr, ext)?;
        comps.perc = perc.value().data()[0].as_f64();
        total = total.add(&perc.scale(T::lit(weights.perc)))?;
    }
    if let Some(logits) = disc_logits {
        let adv = generator_adversarial_loss(logits);
        comps.adv = adv.value().data()[0].as_f64();
        total = total.add(&adv.scale(T::lit(weights.adv)))?;
    }
    comps.total = total.value().data()[0].as_f64();
    Ok((total, comps))
}
