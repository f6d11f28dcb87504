//! Bicubic resampling with half-pixel centers, optional antialiasing on
//! downscale, and clamped edge coordinates.

use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Keys cubic convolution kernel, `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let ax = x.abs();
    if ax <= 1.0 {
        (A + 2.0) * ax.powi(3) - (A + 3.0) * ax * ax + 1.0
    } else if ax < 2.0 {
        A * ax.powi(3) - 5.0 * A * ax * ax + 8.0 * A * ax - 4.0 * A
    } else {
        0.0
    }
}

/// Sampling weights along one axis: for each output index, the contributing
/// `(input index, weight)` pairs. Weights of every output sum to one.
#[derive(Clone, Debug)]
pub struct ResizeWeights {
    input: usize,
    offsets: Vec<usize>,
    taps: Vec<(usize, f64)>,
}

impl ResizeWeights {
    pub fn new(input: usize, output: usize, antialias: bool) -> Self {
        let scale = output as f64 / input as f64;
        let stretch = if antialias && scale < 1.0 { scale } else { 1.0 };
        let support = 4.0 / stretch;
        let ntaps = support.ceil() as isize + 2;
        let mut offsets = Vec::with_capacity(output + 1);
        let mut taps = Vec::new();
        offsets.push(0);
        for i in 0..output {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let left = (u - support / 2.0).floor() as isize;
            let start = taps.len();
            let mut total = 0.0;
            for t in 0..ntaps {
                let j = left + t;
                let wgt = stretch * cubic_weight(stretch * (u - j as f64));
                if wgt == 0.0 {
                    continue;
                }
                let src = j.clamp(0, input as isize - 1) as usize;
                total += wgt;
                match taps[start..].iter_mut().find(|(s, _)| *s == src) {
                    Some((_, acc)) => *acc += wgt,
                    None => taps.push((src, wgt)),
                }
            }
            for (_, wgt) in &mut taps[start..] {
                *wgt /= total;
            }
            offsets.push(taps.len());
        }
        Self {
            input,
            offsets,
            taps,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input
    }

    pub fn output_len(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Contributing `(input index, weight)` pairs of output index `i`.
    pub fn taps(&self, i: usize) -> &[(usize, f64)] {
        &self.taps[self.offsets[i]..self.offsets[i + 1]]
    }

    fn typed<T: Scalar>(&self) -> Vec<(usize, T)> {
        self.taps.iter().map(|&(j, w)| (j, T::lit(w))).collect()
    }
}

struct Plan<T> {
    rows: ResizeWeights,
    cols: ResizeWeights,
    row_w: Vec<(usize, T)>,
    col_w: Vec<(usize, T)>,
}

impl<T: Scalar> Plan<T> {
    fn new(h: usize, w: usize, out_h: usize, out_w: usize, antialias: bool) -> Self {
        let rows = ResizeWeights::new(h, out_h, antialias);
        let cols = ResizeWeights::new(w, out_w, antialias);
        let row_w = rows.typed();
        let col_w = cols.typed();
        Self {
            rows,
            cols,
            row_w,
            col_w,
        }
    }

    fn forward_plane(&self, src: &[T], dst: &mut [T], tmp: &mut [T]) {
        let (h, w) = (self.rows.input, self.cols.input);
        let (oh, ow) = (self.rows.output_len(), self.cols.output_len());
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            for x in 0..ow {
                let mut acc = T::zero();
                for &(j, wt) in &self.col_w[self.cols.offsets[x]..self.cols.offsets[x + 1]] {
                    acc += srow[j] * wt;
                }
                tmp[y * ow + x] = acc;
            }
        }
        for y in 0..oh {
            let drow = &mut dst[y * ow..(y + 1) * ow];
            drow.iter_mut().for_each(|v| *v = T::zero());
            for &(j, wt) in &self.row_w[self.rows.offsets[y]..self.rows.offsets[y + 1]] {
                for (d, &s) in drow.iter_mut().zip(&tmp[j * ow..(j + 1) * ow]) {
                    *d += s * wt;
                }
            }
        }
    }

    fn backward_plane(&self, g: &[T], dst: &mut [T], tmp: &mut [T]) {
        let (h, w) = (self.rows.input, self.cols.input);
        let (oh, ow) = (self.rows.output_len(), self.cols.output_len());
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..oh {
            let grow = &g[y * ow..(y + 1) * ow];
            for &(j, wt) in &self.row_w[self.rows.offsets[y]..self.rows.offsets[y + 1]] {
                for (d, &s) in tmp[j * ow..(j + 1) * ow].iter_mut().zip(grow) {
                    *d += s * wt;
                }
            }
        }
        for y in 0..h {
            let drow = &mut dst[y * w..(y + 1) * w];
            drow.iter_mut().for_each(|v| *v = T::zero());
            for x in 0..ow {
                let gv = tmp[y * ow + x];
                for &(j, wt) in &self.col_w[self.cols.offsets[x]..self.cols.offsets[x + 1]] {
                    drow[j] += gv * wt;
                }
            }
        }
    }
}

fn check(h_out: usize, w_out: usize) -> Result<()> {
    if h_out == 0 || w_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "bicubic output size must be positive, got {h_out}x{w_out}"
        )));
    }
    Ok(())
}

/// Non-differentiable bicubic resize of an `[N,C,H,W]` tensor.
pub fn bicubic_resize_tensor<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> Result<Tensor<T>> {
    check(out_h, out_w)?;
    let [n, c, h, w] = input.dims4()?;
    let plan = Plan::<T>::new(h, w, out_h, out_w, antialias);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    let mut tmp = vec![T::zero(); h * out_w];
    for (src, dst) in input.data().chunks_exact(h * w).zip(out.chunks_exact_mut(out_h * out_w)) {
        plan.forward_plane(src, dst, &mut tmp);
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

impl<T: Scalar> Var<T> {
    /// Differentiable bicubic resize (fixed sampling weights).
    pub fn bicubic_resize(&self, out_h: usize, out_w: usize, antialias: bool) -> Result<Var<T>> {
        let y = bicubic_resize_tensor(self.value(), out_h, out_w, antialias)?;
        let [n, c, h, w] = self.value().dims4()?;
        let plan = Plan::<T>::new(h, w, out_h, out_w, antialias);
        Ok(self.tape().record(y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            let mut tmp = vec![T::zero(); h * out_w];
            for (gp, dp) in g.data().chunks_exact(out_h * out_w).zip(gx.chunks_exact_mut(h * w)) {
                plan.backward_plane(gp, dp, &mut tmp);
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        assert!((cubic_weight(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_weight(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn same_size_is_identity() {
        let t = Tensor::<f64>::from_fn(&[1, 2, 5, 7], |i| (i as f64 * 0.37).sin());
        let r = bicubic_resize_tensor(&t, 5, 7, true).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn weights_partition_unity() {
        for (i, o) in [(64, 16), (16, 64), (30, 10), (9, 27), (7, 5)] {
            let rw = ResizeWeights::new(i, o, true);
            for k in 0..o {
                let s: f64 = rw.taps(k).iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_size_rejected() {
        let t = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(bicubic_resize_tensor(&t, 0, 4, true).is_err());
    }
}
