//! Y-channel PSNR and SSIM with a border shave.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};

use crate::data::rgb_to_ycbcr_y;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `(height, width)` of a single-plane image (`[H, W]`, `[1, H, W]` or
/// `[1, 1, H, W]`).
fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("metric", "shape", format!("expected one plane, got {shape:?}"))),
    }
}

fn same_plane<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let da = plane_dims(a.shape())?;
    let db = plane_dims(b.shape())?;
    if da != db {
        return Err(Error::shape(op, "size", format!("{da:?} vs {db:?}")));
    }
    Ok(da)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; `+inf` when identical.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_plane("psnr", a, b)?;
    let n = a.numel() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable Gaussian filter over valid positions.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM with dynamic range 1, averaged over valid window
/// positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (h, w) = same_plane("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let x: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let sxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let syy = filter_valid(&prod(&y, &y), h, w, &taps);
    let sxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Drops `border` pixels from every side of a `[.., H, W]` tensor.
pub fn shave<T: Scalar>(img: &Tensor<T>, border: usize) -> Result<Tensor<T>> {
    let shape = img.shape();
    if shape.len() < 2 {
        return Err(Error::shape("shave", "rank", format!("{shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::InvalidArgument(format!("cannot shave {border} from {h}x{w}")));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let planes = img.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for r in border..h - border {
            let s = (p * h + r) * w + border;
            out.extend_from_slice(&img.data()[s..s + ow]);
        }
    }
    let mut new_shape = shape.to_vec();
    let k = new_shape.len();
    new_shape[k - 2] = oh;
    new_shape[k - 1] = ow;
    Tensor::new(&new_shape, out)
}

/// Y-channel `(psnr, ssim)` of two RGB images after shaving `border` pixels.
pub fn evaluate_rgb<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, border: usize) -> Result<(f64, f64)> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape(
            "evaluate",
            "shape",
            format!("{:?} vs {:?}", sr.shape(), hr.shape()),
        ));
    }
    let ys = shave(&rgb_to_ycbcr_y(sr)?, border)?;
    let yh = shave(&rgb_to_ycbcr_y(hr)?, border)?;
    Ok((psnr(&ys, &yh)?, ssim(&ys, &yh)?))
}

/// Writes infinite PSNR as the string `"inf"`.
fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub name: String,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    /// Blur width the LR input was synthesized with, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub kernel_width: f64,
    pub count: usize,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub channel: String,
    pub border_shave: usize,
    pub images: Vec<ImageMetric>,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub by_kernel_width: Vec<GroupMetric>,
}

impl MetricReport {
    pub fn new(border_shave: usize, images: Vec<ImageMetric>) -> Self {
        let mean = |f: &dyn Fn(&ImageMetric) -> f64, items: &[&ImageMetric]| {
            if items.is_empty() {
                f64::NAN
            } else {
                items.iter().map(|m| f(m)).sum::<f64>() / items.len() as f64
            }
        };
        let all: Vec<&ImageMetric> = images.iter().collect();
        let mut widths: Vec<f64> = images.iter().filter_map(|m| m.kernel_width).collect();
        widths.sort_by(f64::total_cmp);
        widths.dedup();
        let by_kernel_width = widths
            .into_iter()
            .map(|kw| {
                let group: Vec<&ImageMetric> = images.iter().filter(|m| m.kernel_width == Some(kw)).collect();
                GroupMetric {
                    kernel_width: kw,
                    count: group.len(),
                    mean_psnr: mean(&|m| m.psnr, &group),
                    mean_ssim: mean(&|m| m.ssim, &group),
                }
            })
            .collect();
        Self {
            channel: "Y (BT.601)".into(),
            border_shave,
            mean_psnr: mean(&|m| m.psnr, &all),
            mean_ssim: mean(&|m| m.ssim, &all),
            images,
            by_kernel_width,
        }
    }

    /// Plain-text table: one row per image, a mean row, and per-width means.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# channel {}, border shave {} px", self.channel, self.border_shave);
        let _ = writeln!(s, "{:<32} {:>10} {:>8}", "image", "PSNR", "SSIM");
        for m in &self.images {
            let _ = writeln!(s, "{:<32} {:>10} {:>8.4}", m.name, fmt_db(m.psnr), m.ssim);
        }
        let _ = writeln!(s, "{:<32} {:>10} {:>8.4}", "mean", fmt_db(self.mean_psnr), self.mean_ssim);
        if !self.by_kernel_width.is_empty() {
            let _ = writeln!(s, "{:<32} {:>10} {:>8}", "kernel width", "PSNR", "SSIM");
            for g in &self.by_kernel_width {
                let _ = writeln!(
                    s,
                    "{:<32} {:>10} {:>8.4}",
                    format!("{:.2} (n={})", g.kernel_width, g.count),
                    fmt_db(g.mean_psnr),
                    g.mean_ssim
                );
            }
        }
        s
    }
}
