use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

use super::config::AdamConfig;

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (n, t) in params.iter() {
                s.insert(n, Tensor::zeros(t.shape()));
            }
            s
        };
        Self { m: zeros(), v: zeros() }
    }

    /// Entries `<prefix>m.<param>` and `<prefix>v.<param>`.
    pub fn write_to(&self, store: &mut ParamStore<T>, prefix: &str) {
        for (kind, s) in [("m", &self.m), ("v", &self.v)] {
            for (n, t) in s.iter() {
                store.insert(format!("{prefix}{kind}.{n}"), t.clone());
            }
        }
    }

    /// Reads the moments of every parameter in `params`.
    pub fn read_from(store: &ParamStore<T>, prefix: &str, params: &ParamStore<T>) -> Result<Self> {
        let mut out = Self::new(params);
        for (kind, s) in [("m", &mut out.m), ("v", &mut out.v)] {
            for (n, t) in params.iter() {
                let key = format!("{prefix}{kind}.{n}");
                let saved = store
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry `{key}`")))?;
                if saved.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("`{key}` has shape {:?}", saved.shape())));
                }
                s.insert(n, saved.clone());
            }
        }
        Ok(out)
    }
}

/// Rejects the step when any gradient is non-finite, naming the parameter.
pub fn check_gradients<T: Scalar>(params: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                "gradient",
                format!("`{name}`: {:?} vs {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Bias-corrected Adam update for step `t` (1-based).
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    t: u64,
    config: &AdamConfig,
) -> Result<()> {
    check_gradients(params, grads)?;
    if t == 0 {
        return Err(Error::InvalidArgument("adam step count is 1-based".into()));
    }
    let AdamConfig { beta1, beta2, eps } = *config;
    let exp = t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - beta1.powi(exp);
    let c2 = 1.0 - beta2.powi(exp);
    let it = params.tensors_mut().zip(state.m.tensors_mut()).zip(state.v.tensors_mut());
    for (g, ((p, m), v)) in grads.iter().zip(it) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64();
            let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
            let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
            m[i] = T::lit(mi);
            v[i] = T::lit(vi);
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p[i] = T::lit(p[i].as_f64() - step);
        }
    }
    Ok(())
}
