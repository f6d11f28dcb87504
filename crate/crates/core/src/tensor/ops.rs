use std::rc::Rc;

use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            "operands",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn dims3(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 3]> {
    match t.shape()[..] {
        [b, m, n] => Ok([b, m, n]),
        _ => Err(Error::shape(
            op,
            "rank",
            format!("expected rank 3, got {:?}", t.shape()),
        )),
    }
}

fn dims4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    t.dims4().map_err(|_| {
        Error::shape(
            op,
            "rank",
            format!("expected rank 4 (N,C,H,W), got {:?}", t.shape()),
        )
    })
}

/// Batched product of logical `[m,k] x [k,n]` matrices, with optional
/// transposed storage of either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * m * k..(i + 1) * m * k],
            rsa,
            csa,
            &b[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            beta,
            &mut out[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("add", self, other)?;
        let y = self.value().zip_map(other.value(), |a, b| a + b);
        Ok(self
            .tape()
            .record(y, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", self, other)?;
        let y = self.value().zip_map(other.value(), |a, b| a - b);
        Ok(self.tape().record(y, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", self, other)?;
        let y = self.value().zip_map(other.value(), |a, b| a * b);
        let (a, b) = (self.value_rc(), other.value_rc());
        Ok(self.tape().record(y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, b| g * b)),
                need[1].then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        }))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: T) -> Var<T> {
        let y = self.value().map(|x| x * c);
        self.tape()
            .record(y, &[self], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, c: T) -> Var<T> {
        let y = self.value().map(|x| x + c);
        self.tape().record(y, &[self], |g, _| vec![Some(g.clone())])
    }

    /// `x[n,c,h,w] * s[n,c,0,0]`.
    pub fn mul_channel(&self, s: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = dims4("mul_channel", self.value())?;
        if s.shape() != [n, c, 1, 1] {
            return Err(Error::shape(
                "mul_channel",
                "scale",
                format!("expected [{n}, {c}, 1, 1], got {:?}", s.shape()),
            ));
        }
        let hw = h * w;
        let xs = self.value().data();
        let ss = s.value().data();
        let mut y = Vec::with_capacity(xs.len());
        for (plane, &sc) in xs.chunks_exact(hw).zip(ss) {
            y.extend(plane.iter().map(|&v| v * sc));
        }
        let (xv, sv) = (self.value_rc(), s.value_rc());
        let y = Tensor::from_parts(self.shape().to_vec(), y);
        Ok(self.tape().record(y, &[self, s], move |g, need| {
            let gx = need[0].then(|| {
                let mut out = Vec::with_capacity(g.numel());
                for (plane, &sc) in g.data().chunks_exact(hw).zip(sv.data()) {
                    out.extend(plane.iter().map(|&v| v * sc));
                }
                Tensor::from_parts(g.shape().to_vec(), out)
            });
            let gs = need[1].then(|| {
                let sums = g
                    .data()
                    .chunks_exact(hw)
                    .zip(xv.data().chunks_exact(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                    .collect();
                Tensor::from_parts(vec![n, c, 1, 1], sums)
            });
            vec![gx, gs]
        }))
    }

    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let y = self.value().map(f);
        let x = self.value_rc();
        self.tape().record(y, &[self], move |g, _| {
            let gx = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| df(x, g))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        })
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, g| if x > T::zero() { g } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        self.unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, g| if x > T::zero() { g } else { g * slope },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<T> {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
        self.unary(
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, g| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                g * (cdf + x * pdf)
            },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        let y = self.value().map(sigmoid);
        let yv = Rc::new(y.clone());
        self.tape().record(y, &[self], move |g, _| {
            vec![Some(g.zip_map(&yv, |g, y| g * y * (T::one() - y)))]
        })
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&self) -> Var<T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, g| g * sigmoid(x),
        )
    }

    pub fn sum(&self) -> Var<T> {
        let y = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        self.tape().record(y, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::lit(self.value().numel() as f64);
        let y = Tensor::scalar(self.value().sum() / n);
        let shape = self.shape().to_vec();
        self.tape().record(y, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0] / n))]
        })
    }

    /// Mean absolute difference; the subgradient at zero is zero.
    pub fn l1_distance(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("l1_distance", self, other)?;
        let n = T::lit(self.value().numel() as f64);
        let diff = self.value().zip_map(other.value(), |a, b| a - b);
        let y = Tensor::scalar(diff.data().iter().map(|d| d.abs()).sum::<T>() / n);
        Ok(self.tape().record(y, &[self, other], move |g, need| {
            let s = g.data()[0] / n;
            let ga = diff.map(|d| {
                if d > T::zero() {
                    s
                } else if d < T::zero() {
                    -s
                } else {
                    T::zero()
                }
            });
            let gb = need[1].then(|| ga.map(|x| -x));
            vec![need[0].then_some(ga), gb]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let y = self.value().clone().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.tape().record(y, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&orig).expect("same numel"))]
        }))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&self) -> Result<Var<T>> {
        let [b, m, n] = dims3("transpose_last2", self.value())?;
        let y = transpose3(self.value(), b, m, n);
        Ok(self.tape().record(y, &[self], move |g, _| {
            vec![Some(transpose3(g, b, n, m))]
        }))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> Var<T> {
        let k = *self.shape().last().unwrap();
        let mut y = self.value().clone();
        for row in y.data_mut().chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let yv = Rc::new(y.clone());
        self.tape().record(y, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(g.numel());
            for (gr, yr) in g.data().chunks_exact(k).zip(yv.data().chunks_exact(k)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        })
    }

    /// `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn matmul_batched(&self, other: &Var<T>) -> Result<Var<T>> {
        let [b, m, k] = dims3("matmul_batched", self.value())?;
        let [b2, k2, n] = dims3("matmul_batched", other.value())?;
        if b != b2 {
            return Err(Error::shape("matmul_batched", "batch", format!("{b} vs {b2}")));
        }
        if k != k2 {
            return Err(Error::shape("matmul_batched", "inner", format!("{k} vs {k2}")));
        }
        let mut y = vec![T::zero(); b * m * n];
        bmm(self.value().data(), other.value().data(), &mut y, b, m, k, n, false, false, false);
        let (av, bv) = (self.value_rc(), other.value_rc());
        let y = Tensor::from_parts(vec![b, m, n], y);
        Ok(self.tape().record(y, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut out = vec![T::zero(); b * m * k];
                bmm(g.data(), bv.data(), &mut out, b, m, n, k, false, true, false);
                Tensor::from_parts(vec![b, m, k], out)
            });
            let gb = need[1].then(|| {
                let mut out = vec![T::zero(); b * k * n];
                bmm(av.data(), g.data(), &mut out, b, k, m, n, true, false, false);
                Tensor::from_parts(vec![b, k, n], out)
            });
            vec![ga, gb]
        }))
    }

    /// `[B,M,K] x [B,N,K]^T -> [B,M,N]`.
    pub fn matmul_batched_nt(&self, other: &Var<T>) -> Result<Var<T>> {
        let [b, m, k] = dims3("matmul_batched_nt", self.value())?;
        let [b2, n, k2] = dims3("matmul_batched_nt", other.value())?;
        if b != b2 {
            return Err(Error::shape("matmul_batched_nt", "batch", format!("{b} vs {b2}")));
        }
        if k != k2 {
            return Err(Error::shape("matmul_batched_nt", "inner", format!("{k} vs {k2}")));
        }
        let mut y = vec![T::zero(); b * m * n];
        bmm(self.value().data(), other.value().data(), &mut y, b, m, k, n, false, true, false);
        let (av, bv) = (self.value_rc(), other.value_rc());
        let y = Tensor::from_parts(vec![b, m, n], y);
        Ok(self.tape().record(y, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut out = vec![T::zero(); b * m * k];
                bmm(g.data(), bv.data(), &mut out, b, m, n, k, false, false, false);
                Tensor::from_parts(vec![b, m, k], out)
            });
            let gb = need[1].then(|| {
                let mut out = vec![T::zero(); b * n * k];
                bmm(g.data(), av.data(), &mut out, b, n, m, k, true, false, false);
                Tensor::from_parts(vec![b, n, k], out)
            });
            vec![ga, gb]
        }))
    }

    /// Splits the channel axis of a rank-4 tensor into `parts` equal chunks.
    pub fn chunk_channels(&self, parts: usize) -> Result<Vec<Var<T>>> {
        let [n, c, h, w] = dims4("chunk_channels", self.value())?;
        if parts == 0 || c % parts != 0 {
            return Err(Error::shape(
                "chunk_channels",
                "channels",
                format!("{c} channels do not split into {parts} chunks"),
            ));
        }
        let widths = vec![c / parts; parts];
        let mut offset = 0;
        let mut out = Vec::with_capacity(parts);
        for &cw in &widths {
            out.push(self.slice_channels(offset, cw, [n, c, h, w]));
            offset += cw;
        }
        Ok(out)
    }

    fn slice_channels(&self, start: usize, width: usize, [n, c, h, w]: [usize; 4]) -> Var<T> {
        let hw = h * w;
        let src = self.value().data();
        let mut y = Vec::with_capacity(n * width * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            y.extend_from_slice(&src[base..base + width * hw]);
        }
        let y = Tensor::from_parts(vec![n, width, h, w], y);
        self.tape().record(y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); n * c * hw];
            for b in 0..n {
                let dst = (b * c + start) * hw;
                gx[dst..dst + width * hw]
                    .copy_from_slice(&g.data()[b * width * hw..(b + 1) * width * hw]);
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
        })
    }

    /// Reflect-pads the spatial axes (edge pixel not repeated).
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<T>> {
        let [n, c, h, w] = dims4("pad_reflect", self.value())?;
        if top >= h || bottom >= h || left >= w || right >= w {
            return Err(Error::shape(
                "pad_reflect",
                "spatial",
                format!("padding ({top},{bottom},{left},{right}) too large for {h}x{w}"),
            ));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let rows: Vec<usize> = (0..oh).map(|i| reflect(i as isize - top as isize, h)).collect();
        let cols: Vec<usize> = (0..ow).map(|j| reflect(j as isize - left as isize, w)).collect();
        let src = self.value().data();
        let mut y = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks_exact(h * w) {
            for &r in &rows {
                y.extend(cols.iter().map(|&cc| plane[r * w + cc]));
            }
        }
        let y = Tensor::from_parts(vec![n, c, oh, ow], y);
        Ok(self.tape().record(y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gp, dp) in g.data().chunks_exact(oh * ow).zip(gx.chunks_exact_mut(h * w)) {
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &cc) in cols.iter().enumerate() {
                        dp[r * w + cc] += gp[i * ow + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
        }))
    }

    /// Spatial crop `[y0, y0+height) x [x0, x0+width)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Var<T>> {
        let [n, c, h, w] = dims4("crop", self.value())?;
        if height == 0 || width == 0 || y0 + height > h || x0 + width > w {
            return Err(Error::shape(
                "crop",
                "spatial",
                format!("window {height}x{width}@({y0},{x0}) outside {h}x{w}"),
            ));
        }
        let y = crop_tensor(self.value(), y0, x0, height, width);
        Ok(self.tape().record(y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gp, dp) in g
                .data()
                .chunks_exact(height * width)
                .zip(gx.chunks_exact_mut(h * w))
            {
                for i in 0..height {
                    dp[(y0 + i) * w + x0..(y0 + i) * w + x0 + width]
                        .copy_from_slice(&gp[i * width..(i + 1) * width]);
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
        }))
    }

    /// Rearranges `[N, C*r*r, H, W]` into `[N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<T>> {
        let [n, c, h, w] = dims4("pixel_shuffle", self.value())?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                "channels",
                format!("{c} channels not divisible by r^2 = {}", r * r),
            ));
        }
        let y = shuffle(self.value(), n, c / (r * r), h, w, r, true);
        Ok(self.tape().record(y, &[self], move |g, _| {
            vec![Some(shuffle(g, n, c / (r * r), h, w, r, false))]
        }))
    }

    /// Inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Var<T>> {
        let [n, c, h, w] = dims4("pixel_unshuffle", self.value())?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape(
                "pixel_unshuffle",
                "spatial",
                format!("{h}x{w} not divisible by {r}"),
            ));
        }
        let (h0, w0) = (h / r, w / r);
        let y = shuffle(self.value(), n, c, h0, w0, r, false);
        Ok(self.tape().record(y, &[self], move |g, _| {
            vec![Some(shuffle(g, n, c, h0, w0, r, true))]
        }))
    }
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Var<T>]) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let [n, _, h, w] = dims4("concat_channels", first.value())?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let [pn, pc, ph, pw] = dims4("concat_channels", p.value())?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                "batch/spatial",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let hw = h * w;
    let mut y = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (p, &cw) in parts.iter().zip(&widths) {
            y.extend_from_slice(&p.value().data()[b * cw * hw..(b + 1) * cw * hw]);
        }
    }
    let y = Tensor::from_parts(vec![n, total, h, w], y);
    Ok(first.tape().record(y, parts, move |g, need| {
        let mut offset = 0;
        let mut grads = Vec::with_capacity(widths.len());
        for (&cw, &needed) in widths.iter().zip(need) {
            grads.push(needed.then(|| {
                let mut d = Vec::with_capacity(n * cw * hw);
                for b in 0..n {
                    let s = (b * total + offset) * hw;
                    d.extend_from_slice(&g.data()[s..s + cw * hw]);
                }
                Tensor::from_parts(vec![n, cw, h, w], d)
            }));
            offset += cw;
        }
        grads
    }))
}

/// Reflection without edge repeat, folded until in range.
pub(crate) fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub(crate) fn crop_tensor<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, height: usize, width: usize) -> Tensor<T> {
    let [n, c, h, w] = t.dims4().expect("rank 4");
    let mut y = Vec::with_capacity(n * c * height * width);
    for plane in t.data().chunks_exact(h * w) {
        for i in 0..height {
            y.extend_from_slice(&plane[(y0 + i) * w + x0..(y0 + i) * w + x0 + width]);
        }
    }
    Tensor::from_parts(vec![n, c, height, width], y)
}

fn transpose3<T: Scalar>(t: &Tensor<T>, b: usize, m: usize, n: usize) -> Tensor<T> {
    let src = t.data();
    let mut out = vec![T::zero(); b * m * n];
    for i in 0..b {
        let s = &src[i * m * n..(i + 1) * m * n];
        let d = &mut out[i * m * n..(i + 1) * m * n];
        for r in 0..m {
            for col in 0..n {
                d[col * m + r] = s[r * n + col];
            }
        }
    }
    Tensor::from_parts(vec![b, n, m], out)
}

/// `forward = true`: `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`; otherwise the
/// inverse. `c`, `h`, `w` always describe the low-resolution layout.
fn shuffle<T: Scalar>(t: &Tensor<T>, n: usize, c: usize, h: usize, w: usize, r: usize, forward: bool) -> Tensor<T> {
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    let (oh, ow) = (h * r, w * r);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let lo_c = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let lo = ((b * c * r * r + lo_c) * h + y) * w + x;
                            let hi = ((b * c + ch) * oh + y * r + i) * ow + x * r + j;
                            if forward {
                                out[hi] = src[lo];
                            } else {
                                out[lo] = src[hi];
                            }
                        }
                    }
                }
            }
        }
    }
    if forward {
        Tensor::from_parts(vec![n, c, oh, ow], out)
    } else {
        Tensor::from_parts(vec![n, c * r * r, h, w], out)
    }
}

/// Token groups for bucketed attention: every query in `queries` attends to
/// exactly the keys in `keys` (duplicates count as separate entries).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Vec<u32>,
    pub keys: Vec<u32>,
}

/// Work counter reported by grouped attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Number of (query, key) score entries computed.
    pub attended_pairs: usize,
}

impl AttentionStats {
    pub fn merge(&mut self, other: AttentionStats) {
        self.attended_pairs += other.attended_pairs;
    }
}

/// Softmax attention restricted to token groups.
///
/// `q`, `k`: `[N, T, D]`; `v`: `[N, T, E]`; `groups[n]` partitions the queries
/// of batch item `n`. Returns `[N, T, E]`.
pub fn grouped_attention<T: Scalar>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    groups: Vec<Vec<AttentionGroup>>,
    scale: T,
) -> Result<(Var<T>, AttentionStats)> {
    let [n, t, d] = dims3("grouped_attention", q.value())?;
    if k.shape() != [n, t, d] {
        return Err(Error::shape(
            "grouped_attention",
            "keys",
            format!("{:?} vs {:?}", k.shape(), q.shape()),
        ));
    }
    let [vn, vt, e] = dims3("grouped_attention", v.value())?;
    if (vn, vt) != (n, t) {
        return Err(Error::shape(
            "grouped_attention",
            "values",
            format!("{:?} vs {:?}", v.shape(), q.shape()),
        ));
    }
    if groups.len() != n {
        return Err(Error::shape(
            "grouped_attention",
            "groups",
            format!("{} group lists for batch {n}", groups.len()),
        ));
    }
    let mut stats = AttentionStats::default();
    let mut probs: Vec<Vec<Vec<T>>> = Vec::with_capacity(n);
    let mut out = vec![T::zero(); n * t * e];
    let (qd, kd, vd) = (q.value().data(), k.value().data(), v.value().data());
    for (b, item_groups) in groups.iter().enumerate() {
        let mut item_probs = Vec::with_capacity(item_groups.len());
        for g in item_groups {
            let (nq, nk) = (g.queries.len(), g.keys.len());
            if nq == 0 {
                item_probs.push(Vec::new());
                continue;
            }
            if nk == 0 {
                return Err(Error::InvalidArgument("attention group without keys".into()));
            }
            stats.attended_pairs += nq * nk;
            let qg = gather_rows(qd, b * t, &g.queries, d);
            let kg = gather_rows(kd, b * t, &g.keys, d);
            let vg = gather_rows(vd, b * t, &g.keys, e);
            let mut p = vec![T::zero(); nq * nk];
            T::gemm(nq, d, nk, scale, &qg, d as isize, 1, &kg, 1, d as isize, T::zero(), &mut p, nk as isize, 1);
            for row in p.chunks_exact_mut(nk) {
                softmax_in_place(row);
            }
            let mut og = vec![T::zero(); nq * e];
            T::gemm(nq, nk, e, T::one(), &p, nk as isize, 1, &vg, e as isize, 1, T::zero(), &mut og, e as isize, 1);
            for (qi, row) in g.queries.iter().zip(og.chunks_exact(e)) {
                let dst = (b * t + *qi as usize) * e;
                out[dst..dst + e].copy_from_slice(row);
            }
            item_probs.push(p);
        }
        probs.push(item_probs);
    }
    let y = Tensor::from_parts(vec![n, t, e], out);
    let (qv, kv, vv) = (q.value_rc(), k.value_rc(), v.value_rc());
    let var = q.tape().record(y, &[q, k, v], move |gout, _| {
        let mut gq = vec![T::zero(); n * t * d];
        let mut gk = vec![T::zero(); n * t * d];
        let mut gv = vec![T::zero(); n * t * e];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for (b, item_groups) in groups.iter().enumerate() {
            for (g, p) in item_groups.iter().zip(&probs[b]) {
                let (nq, nk) = (g.queries.len(), g.keys.len());
                if nq == 0 {
                    continue;
                }
                let qg = gather_rows(qd, b * t, &g.queries, d);
                let kg = gather_rows(kd, b * t, &g.keys, d);
                let vg = gather_rows(vd, b * t, &g.keys, e);
                let go = gather_rows(gout.data(), b * t, &g.queries, e);
                // dP = dO V^T
                let mut dp = vec![T::zero(); nq * nk];
                T::gemm(nq, e, nk, T::one(), &go, e as isize, 1, &vg, 1, e as isize, T::zero(), &mut dp, nk as isize, 1);
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for (dr, pr) in dp.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                let mut dq = vec![T::zero(); nq * d];
                T::gemm(nq, nk, d, T::one(), &dp, nk as isize, 1, &kg, d as isize, 1, T::zero(), &mut dq, d as isize, 1);
                let mut dk = vec![T::zero(); nk * d];
                T::gemm(nk, nq, d, T::one(), &dp, 1, nk as isize, &qg, d as isize, 1, T::zero(), &mut dk, d as isize, 1);
                let mut dv = vec![T::zero(); nk * e];
                T::gemm(nk, nq, e, T::one(), p, 1, nk as isize, &go, e as isize, 1, T::zero(), &mut dv, e as isize, 1);
                scatter_add_rows(&mut gq, b * t, &g.queries, d, &dq);
                scatter_add_rows(&mut gk, b * t, &g.keys, d, &dk);
                scatter_add_rows(&mut gv, b * t, &g.keys, e, &dv);
            }
        }
        vec![
            Some(Tensor::from_parts(vec![n, t, d], gq)),
            Some(Tensor::from_parts(vec![n, t, d], gk)),
            Some(Tensor::from_parts(vec![n, t, e], gv)),
        ]
    });
    Ok((var, stats))
}

fn gather_rows<T: Scalar>(src: &[T], base: usize, idx: &[u32], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        let s = (base + i as usize) * width;
        out.extend_from_slice(&src[s..s + width]);
    }
    out
}

fn scatter_add_rows<T: Scalar>(dst: &mut [T], base: usize, idx: &[u32], width: usize, rows: &[T]) {
    for (&i, row) in idx.iter().zip(rows.chunks_exact(width)) {
        let s = (base + i as usize) * width;
        for (a, &b) in dst[s..s + width].iter_mut().zip(row) {
            *a += b;
        }
    }
}
