use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Scalar> Var<T> {
    /// Normalizes the channel vector at every spatial location, then applies
    /// the per-channel affine `gamma`, `beta`.
    pub fn layernorm_channels(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let [n, c, h, w] = self.value().dims4().map_err(|_| {
            Error::shape("layernorm_channels", "rank", format!("{:?}", self.shape()))
        })?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "layernorm_channels",
                "affine",
                format!("expected [{c}], got {:?} / {:?}", gamma.shape(), beta.shape()),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("layernorm eps must be positive".into()));
        }
        let hw = h * w;
        let cn = T::lit(c as f64);
        let x = self.value().data();
        let (g, b) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * hw];
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..n {
            let base = bi * c * hw;
            for s in 0..hw {
                let mut mean = T::zero();
                for ch in 0..c {
                    mean += x[base + ch * hw + s];
                }
                mean = mean / cn;
                let mut var = T::zero();
                for ch in 0..c {
                    let d = x[base + ch * hw + s] - mean;
                    var += d * d;
                }
                let istd = T::one() / (var / cn + eps).sqrt();
                inv_std[bi * hw + s] = istd;
                for ch in 0..c {
                    let i = base + ch * hw + s;
                    xhat[i] = (x[i] - mean) * istd;
                    y[i] = xhat[i] * g[ch] + b[ch];
                }
            }
        }
        let y = Tensor::from_parts(vec![n, c, h, w], y);
        let gv = gamma.value_rc();
        Ok(self.tape().record(y, &[self, gamma, beta], move |gout, need| {
            let gd = gout.data();
            let g = gv.data();
            let mut gx = need[0].then(|| vec![T::zero(); gd.len()]);
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for bi in 0..n {
                let base = bi * c * hw;
                for s in 0..hw {
                    let mut mean_dy = T::zero();
                    let mut mean_dy_xhat = T::zero();
                    for ch in 0..c {
                        let i = base + ch * hw + s;
                        let dy = gd[i] * g[ch];
                        mean_dy += dy;
                        mean_dy_xhat += dy * xhat[i];
                        ggamma[ch] += gd[i] * xhat[i];
                        gbeta[ch] += gd[i];
                    }
                    if let Some(gx) = gx.as_mut() {
                        mean_dy = mean_dy / cn;
                        mean_dy_xhat = mean_dy_xhat / cn;
                        let istd = inv_std[bi * hw + s];
                        for ch in 0..c {
                            let i = base + ch * hw + s;
                            let dy = gd[i] * g[ch];
                            gx[i] = istd * (dy - mean_dy - xhat[i] * mean_dy_xhat);
                        }
                    }
                }
            }
            vec![
                gx.map(|d| Tensor::from_parts(vec![n, c, h, w], d)),
                need[1].then(|| Tensor::from_parts(vec![c], ggamma)),
                need[2].then(|| Tensor::from_parts(vec![c], gbeta)),
            ]
        }))
    }

    /// Per-channel spatial mean, `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&self) -> Result<Var<T>> {
        let [n, c, h, w] = self.value().dims4().map_err(|_| {
            Error::shape("global_avg_pool", "rank", format!("{:?}", self.shape()))
        })?;
        let hw = h * w;
        let denom = T::lit(hw as f64);
        let y: Vec<T> = self
            .value()
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let y = Tensor::from_parts(vec![n, c, 1, 1], y);
        Ok(self.tape().record(y, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv / denom, hw));
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
        }))
    }
}
