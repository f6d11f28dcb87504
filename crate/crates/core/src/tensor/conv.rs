use serde::{Deserialize, Serialize};

use super::ops::{bmm, reflect};
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub mode: PaddingMode,
    pub width: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        mode: PaddingMode::Zero,
        width: 0,
    };

    pub fn zero(width: usize) -> Self {
        Self {
            mode: PaddingMode::Zero,
            width,
        }
    }

    pub fn reflect(width: usize) -> Self {
        Self {
            mode: PaddingMode::Reflect,
            width,
        }
    }

    /// Source index for padded coordinate `i` of an axis of length `n`.
    fn source(&self, i: isize, n: usize) -> Option<usize> {
        if (0..n as isize).contains(&i) {
            return Some(i as usize);
        }
        match self.mode {
            PaddingMode::Zero => None,
            PaddingMode::Reflect => Some(reflect(i, n)),
        }
    }
}

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::shape(
            "conv2d",
            "kernel",
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Per output coordinate and kernel tap, the source index along one axis.
struct AxisMap {
    kernel: usize,
    out: usize,
    stride: usize,
    src: Vec<Option<usize>>, // [tap * out + o]
    /// Source of every coordinate of the padded axis, `o * stride + tap`.
    padded: Vec<Option<usize>>,
}

impl AxisMap {
    fn new(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        let out = conv2d_output_size(input, kernel, stride, padding.width)?;
        if padding.mode == PaddingMode::Reflect && padding.width >= input && input > 1 {
            return Err(Error::shape(
                "conv2d",
                "padding",
                format!("reflect padding {} needs input > {}", padding.width, padding.width),
            ));
        }
        let mut src = Vec::with_capacity(kernel * out);
        for tap in 0..kernel {
            for o in 0..out {
                let i = (o * stride + tap) as isize - padding.width as isize;
                src.push(padding.source(i, input));
            }
        }
        let padded = (0..(out - 1) * stride + kernel)
            .map(|q| padding.source(q as isize - padding.width as isize, input))
            .collect();
        Ok(Self {
            kernel,
            out,
            stride,
            src,
            padded,
        })
    }

    #[inline]
    fn row(&self, tap: usize) -> &[Option<usize>] {
        &self.src[tap * self.out..(tap + 1) * self.out]
    }
}

/// Padded copy of one plane, so every tap reads a contiguous (or strided)
/// run instead of resolving the padding per pixel.
fn pad_plane<T: Scalar>(rows: &AxisMap, cols: &AxisMap, w: usize, src: &[T], buf: &mut [T]) {
    let pw = cols.padded.len();
    for (py, sy) in rows.padded.iter().enumerate() {
        let dst = &mut buf[py * pw..(py + 1) * pw];
        match sy {
            None => dst.iter_mut().for_each(|v| *v = T::zero()),
            Some(sy) => {
                let srow = &src[sy * w..(sy + 1) * w];
                for (d, sx) in dst.iter_mut().zip(&cols.padded) {
                    *d = sx.map_or(T::zero(), |sx| srow[sx]);
                }
            }
        }
    }
}

/// Adjoint of [`pad_plane`], accumulating into `dst`.
fn unpad_add<T: Scalar>(rows: &AxisMap, cols: &AxisMap, w: usize, buf: &[T], dst: &mut [T]) {
    let pw = cols.padded.len();
    for (py, sy) in rows.padded.iter().enumerate() {
        let Some(sy) = sy else { continue };
        let drow = &mut dst[sy * w..(sy + 1) * w];
        for (v, sx) in buf[py * pw..(py + 1) * pw].iter().zip(&cols.padded) {
            if let Some(sx) = sx {
                drow[*sx] += *v;
            }
        }
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    rows: AxisMap,
    cols: AxisMap,
}

impl ConvGeometry {
    fn identity_1x1(&self) -> bool {
        self.rows.kernel == 1
            && self.cols.kernel == 1
            && self.rows.out == self.h
            && self.cols.out == self.w
            && self.rows.row(0).iter().enumerate().all(|(i, s)| *s == Some(i))
            && self.cols.row(0).iter().enumerate().all(|(i, s)| *s == Some(i))
    }

    fn k(&self) -> usize {
        self.c * self.rows.kernel * self.cols.kernel
    }

    fn p(&self) -> usize {
        self.rows.out * self.cols.out
    }

    fn padded_len(&self) -> usize {
        self.rows.padded.len() * self.cols.padded.len()
    }

    /// `[C,H,W]` plane -> `[C*kh*kw, Ho*Wo]` patch matrix.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T], buf: &mut [T]) {
        let (kh, kw, oh, ow) = (self.rows.kernel, self.cols.kernel, self.rows.out, self.cols.out);
        let (sy, sx) = (self.rows.stride, self.cols.stride);
        let pw = self.cols.padded.len();
        let mut r = 0;
        for ch in 0..self.c {
            pad_plane(&self.rows, &self.cols, self.w, &x[ch * self.h * self.w..(ch + 1) * self.h * self.w], buf);
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[r * self.p()..(r + 1) * self.p()];
                    for oy in 0..oh {
                        let base = (oy * sy + ky) * pw + kx;
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if sx == 1 {
                            drow.copy_from_slice(&buf[base..base + ow]);
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = buf[base + ox * sx];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`], accumulating into `dx`.
    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T], buf: &mut [T]) {
        let (kh, kw, oh, ow) = (self.rows.kernel, self.cols.kernel, self.rows.out, self.cols.out);
        let (sy, sx) = (self.rows.stride, self.cols.stride);
        let pw = self.cols.padded.len();
        let mut r = 0;
        for ch in 0..self.c {
            buf.iter_mut().for_each(|v| *v = T::zero());
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[r * self.p()..(r + 1) * self.p()];
                    for oy in 0..oh {
                        let base = (oy * sy + ky) * pw + kx;
                        let srow = &src[oy * ow..(oy + 1) * ow];
                        if sx == 1 {
                            for (d, v) in buf[base..base + ow].iter_mut().zip(srow) {
                                *d += *v;
                            }
                        } else {
                            for (ox, v) in srow.iter().enumerate() {
                                buf[base + ox * sx] += *v;
                            }
                        }
                    }
                    r += 1;
                }
            }
            unpad_add(&self.rows, &self.cols, self.w, buf, &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w]);
        }
    }
}

impl<T: Scalar> Var<T> {
    /// 2-D cross-correlation. `weight` is `[O, C, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<T>> {
        let [n, c, h, w] = self.value().dims4().map_err(|_| {
            Error::shape("conv2d", "input rank", format!("expected N,C,H,W, got {:?}", self.shape()))
        })?;
        let [o, wc, kh, kw] = weight.value().dims4().map_err(|_| {
            Error::shape("conv2d", "weight rank", format!("expected O,C,kh,kw, got {:?}", weight.shape()))
        })?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                "input channels",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("expected [{o}], got {:?}", b.shape()),
                ));
            }
        }
        let geo = ConvGeometry {
            c,
            h,
            w,
            rows: AxisMap::new(h, kh, stride, padding)?,
            cols: AxisMap::new(w, kw, stride, padding)?,
        };
        let (k, p) = (geo.k(), geo.p());
        let (oh, ow) = (geo.rows.out, geo.cols.out);
        let direct = geo.identity_1x1();
        let x = self.value().data();
        let wt = weight.value().data();
        let mut y = vec![T::zero(); n * o * p];
        let mut col = if direct { Vec::new() } else { vec![T::zero(); k * p] };
        let mut buf = if direct { Vec::new() } else { vec![T::zero(); geo.padded_len()] };
        for b in 0..n {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            let cm: &[T] = if direct {
                xb
            } else {
                geo.im2col(xb, &mut col, &mut buf);
                &col
            };
            bmm(wt, cm, &mut y[b * o * p..(b + 1) * o * p], 1, o, k, p, false, false, false);
        }
        if let Some(bias) = bias {
            for (plane, &bv) in y.chunks_exact_mut(p).zip(bias.value().data().iter().cycle()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let y = Tensor::from_parts(vec![n, o, oh, ow], y);
        let (xv, wv) = (self.value_rc(), weight.value_rc());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.tape().record(y, &parents, move |g, need| {
            let gd = g.data();
            let x = xv.data();
            let mut gx = need[0].then(|| vec![T::zero(); n * c * h * w]);
            let mut gw = need[1].then(|| vec![T::zero(); o * k]);
            let mut col = if direct { Vec::new() } else { vec![T::zero(); k * p] };
            let mut dcol = if direct { Vec::new() } else { vec![T::zero(); k * p] };
            let mut buf = if direct { Vec::new() } else { vec![T::zero(); geo.padded_len()] };
            for b in 0..n {
                let gb = &gd[b * o * p..(b + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    let xb = &x[b * c * h * w..(b + 1) * c * h * w];
                    let cm: &[T] = if direct {
                        xb
                    } else {
                        geo.im2col(xb, &mut col, &mut buf);
                        &col
                    };
                    // dW += dY [O,P] * col^T [P,K]
                    bmm(gb, cm, gw, 1, o, p, k, false, true, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * c * h * w..(b + 1) * c * h * w];
                    if direct {
                        bmm(wv.data(), gb, gxb, 1, k, o, p, true, false, false);
                    } else {
                        bmm(wv.data(), gb, &mut dcol, 1, k, o, p, true, false, false);
                        geo.col2im(&dcol, gxb, &mut buf);
                    }
                }
            }
            let mut out = vec![
                gx.map(|d| Tensor::from_parts(vec![n, c, h, w], d)),
                gw.map(|d| Tensor::from_parts(vec![o, c, kh, kw], d)),
            ];
            if need.len() == 3 {
                out.push(need[2].then(|| {
                    let mut gb = vec![T::zero(); o];
                    for (i, plane) in gd.chunks_exact(p).enumerate() {
                        gb[i % o] += plane.iter().copied().sum::<T>();
                    }
                    Tensor::from_parts(vec![o], gb)
                }));
            }
            out
        }))
    }

    /// Per-channel convolution with stride 1. `weight` is `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&self, weight: &Var<T>, padding: Padding) -> Result<Var<T>> {
        let [n, c, h, w] = self.value().dims4().map_err(|_| {
            Error::shape("depthwise_conv2d", "input rank", format!("{:?}", self.shape()))
        })?;
        let [wc, one, kh, kw] = weight.value().dims4().map_err(|_| {
            Error::shape("depthwise_conv2d", "weight rank", format!("{:?}", weight.shape()))
        })?;
        if wc != c || one != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                "weight channels",
                format!("expected [{c}, 1, kh, kw], got {:?}", weight.shape()),
            ));
        }
        let rows = AxisMap::new(h, kh, 1, padding)?;
        let cols = AxisMap::new(w, kw, 1, padding)?;
        let (oh, ow) = (rows.out, cols.out);
        let pw = cols.padded.len();
        let plen = rows.padded.len() * pw;
        let x = self.value().data();
        let wt = weight.value().data();
        let mut y = vec![T::zero(); n * c * oh * ow];
        let mut buf = vec![T::zero(); plen];
        for (pi, (dst, src)) in y.chunks_exact_mut(oh * ow).zip(x.chunks_exact(h * w)).enumerate() {
            let filt = &wt[(pi % c) * kh * kw..(pi % c + 1) * kh * kw];
            pad_plane(&rows, &cols, w, src, &mut buf);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = filt[ky * kw + kx];
                    for oy in 0..oh {
                        let srow = &buf[(oy + ky) * pw + kx..(oy + ky) * pw + kx + ow];
                        for (d, s) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(srow) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
        let y = Tensor::from_parts(vec![n, c, oh, ow], y);
        let (xv, wv) = (self.value_rc(), weight.value_rc());
        Ok(self.tape().record(y, &[self, weight], move |g, need| {
            let mut gx = need[0].then(|| vec![T::zero(); n * c * h * w]);
            let mut gw = need[1].then(|| vec![T::zero(); c * kh * kw]);
            let x = xv.data();
            let wt = wv.data();
            let mut buf = vec![T::zero(); plen];
            let mut gbuf = vec![T::zero(); plen];
            for (pi, gp) in g.data().chunks_exact(oh * ow).enumerate() {
                let ch = pi % c;
                if gw.is_some() {
                    pad_plane(&rows, &cols, w, &x[pi * h * w..(pi + 1) * h * w], &mut buf);
                }
                gbuf.iter_mut().for_each(|v| *v = T::zero());
                for ky in 0..kh {
                    for kx in 0..kw {
                        let tap = ky * kw + kx;
                        let wv = wt[ch * kh * kw + tap];
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let base = (oy + ky) * pw + kx;
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            if gw.is_some() {
                                for (gv, s) in grow.iter().zip(&buf[base..base + ow]) {
                                    acc += *gv * *s;
                                }
                            }
                            if gx.is_some() {
                                for (d, gv) in gbuf[base..base + ow].iter_mut().zip(grow) {
                                    *d += wv * *gv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[ch * kh * kw + tap] += acc;
                        }
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    unpad_add(&rows, &cols, w, &gbuf, &mut gx[pi * h * w..(pi + 1) * h * w]);
                }
            }
            vec![
                gx.map(|d| Tensor::from_parts(vec![n, c, h, w], d)),
                gw.map(|d| Tensor::from_parts(vec![c, 1, kh, kw], d)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn scalar_kernel_scales() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = x.conv2d(&w, None, 1, Padding::NONE).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel_zero_pad() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.5 - 1.0));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = x.conv2d(&tape.constant(k), None, 1, Padding::zero(1)).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn depthwise_channel_isolation() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64).cos()));
        let mut k = Tensor::zeros(&[2, 1, 3, 3]);
        k.data_mut()[9 + 4] = 1.0;
        let y = x.depthwise_conv2d(&tape.constant(k), Padding::reflect(1)).unwrap();
        assert!(y.value().data()[..16].iter().all(|&v| v == 0.0));
        assert_eq!(&y.value().data()[16..], &x.value().data()[16..]);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        let err = x.conv2d(&w, None, 1, Padding::zero(1)).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let dw = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        assert!(x.depthwise_conv2d(&dw, Padding::zero(1)).is_err());
    }

    #[test]
    fn strided_output_size() {
        assert_eq!(conv2d_output_size(8, 3, 2, 1).unwrap(), 4);
        assert_eq!(conv2d_output_size(7, 3, 2, 1).unwrap(), 4);
        assert!(conv2d_output_size(2, 5, 1, 0).is_err());
    }
}
