//! Image I/O, colour conversion and training-pair sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{degrade_item, DegradationSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Scalar, Tensor};

/// Smallest accepted side of a training image.
pub const MIN_IMAGE_SIDE: usize = 64;

/// Decodes a PNG (any colour type) to `[3, H, W]` with `v -> v / 255`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Quantizes to 8 bits (`round(clamp(v, 0, 1) * 255)`) in RGB order.
pub fn to_rgb8<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match *img.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "to_rgb8",
                "shape",
                format!("expected [3, H, W] or [1, 3, H, W], got {:?}", img.shape()),
            ))
        }
    };
    let d = img.data();
    let mut out = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i].as_f64().clamp(0.0, 1.0);
            out[3 * i + c] = (v * 255.0).round() as u8;
        }
    }
    Ok((h, w, out))
}

/// Writes an 8-bit RGB PNG.
pub fn save_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w, bytes) = to_rgb8(img)?;
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// BT.601 studio-swing luma, `[3, H, W]` (or `[1, 3, H, W]`) in `[0, 1]` to
/// `[1, H, W]`: `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`.
pub fn rgb_to_ycbcr_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match *img.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "rgb_to_ycbcr_y",
                "channels",
                format!("expected 3 channels, got shape {:?}", img.shape()),
            ))
        }
    };
    let d = img.data();
    let n = h * w;
    Tensor::new(
        &[1, h, w],
        (0..n)
            .map(|i| {
                let (r, g, b) = (d[i].as_f64(), d[n + i].as_f64(), d[2 * n + i].as_f64());
                T::lit((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)
            })
            .collect(),
    )
}

/// A decoded training image.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
}

impl ImageRecord {
    pub fn new(path: PathBuf, image: Tensor<f32>) -> Result<Self> {
        let (h, w) = match *image.shape() {
            [3, h, w] => (h, w),
            _ => return Err(Error::shape("image_record", "shape", format!("expected [3, H, W], got {:?}", image.shape()))),
        };
        if h.min(w) < MIN_IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "{}: {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                path.display()
            )));
        }
        Ok(Self { path, image })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(path.to_path_buf(), load_png(path)?)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Restrict patches to the centred window.
    CenterThenRandom,
    /// Patches anywhere in the image.
    RandomOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropPolicy {
    pub center_size: usize,
    /// LR patch side; the HR crop is `patch_size * scale`.
    pub patch_size: usize,
    pub mode: CropMode,
    /// Random flips and transposition of the HR crop.
    pub augment: bool,
    pub seed: u64,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self {
            center_size: 512,
            patch_size: 64,
            mode: CropMode::CenterThenRandom,
            augment: false,
            seed: 0,
        }
    }
}

/// Axis-aligned region `rows [top, top + height)`, `cols [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn contains(&self, other: &Window) -> bool {
        other.top >= self.top
            && other.left >= self.left
            && other.top + other.height <= self.top + self.height
            && other.left + other.width <= self.left + self.width
    }
}

impl CropPolicy {
    /// The region patches of side `patch` are drawn from. The centred window
    /// is `center_size` (at least `patch`) clipped to the image, offset by the
    /// floor of the margin.
    pub fn window(&self, h: usize, w: usize, patch: usize) -> Result<Window> {
        if h < patch || w < patch {
            return Err(Error::InvalidArgument(format!("{h}x{w} image is smaller than the {patch}x{patch} patch")));
        }
        Ok(match self.mode {
            CropMode::RandomOnly => Window {
                top: 0,
                left: 0,
                height: h,
                width: w,
            },
            CropMode::CenterThenRandom => {
                let side = self.center_size.max(patch);
                let (wh, ww) = (side.min(h), side.min(w));
                Window {
                    top: (h - wh) / 2,
                    left: (w - ww) / 2,
                    height: wh,
                    width: ww,
                }
            }
        })
    }

    /// Patch of side `patch` for draw `index`: offsets uniform over the window.
    pub fn patch_window(&self, h: usize, w: usize, patch: usize, index: u64) -> Result<Window> {
        let win = self.window(h, w, patch)?;
        let mut rng = seeded(derive_seed(self.seed, index), 3);
        Ok(Window {
            top: win.top + rng.random_range(0..=win.height - patch),
            left: win.left + rng.random_range(0..=win.width - patch),
            height: patch,
            width: patch,
        })
    }
}

fn crop<T: Scalar>(img: &Tensor<T>, win: Window) -> Tensor<T> {
    let w = img.shape()[2];
    let h = img.shape()[1];
    let d = img.data();
    let mut out = Vec::with_capacity(3 * win.height * win.width);
    for c in 0..3 {
        for r in win.top..win.top + win.height {
            let s = (c * h + r) * w + win.left;
            out.extend_from_slice(&d[s..s + win.width]);
        }
    }
    Tensor::new(&[3, win.height, win.width], out).expect("crop inside image")
}

/// `[3, p, p]` patch with `p = policy.patch_size` for draw `index`.
pub fn sample_patch(img: &ImageRecord, policy: &CropPolicy, index: u64) -> Result<Tensor<f32>> {
    let (h, w) = img.dims();
    Ok(crop(&img.image, policy.patch_window(h, w, policy.patch_size, index)?))
}

/// Applies one of the 8 dihedral transforms to a square `[3, p, p]` patch.
fn dihedral(img: &Tensor<f32>, code: u32) -> Tensor<f32> {
    let p = img.shape()[1];
    let d = img.data();
    Tensor::from_fn(&[3, p, p], |i| {
        let (c, r, col) = (i / (p * p), (i / p) % p, i % p);
        let (mut y, mut x) = if code & 4 != 0 { (col, r) } else { (r, col) };
        if code & 1 != 0 {
            x = p - 1 - x;
        }
        if code & 2 != 0 {
            y = p - 1 - y;
        }
        d[(c * p + y) * p + x]
    })
}

/// One `(lr [3, p, p], hr [3, p*s, p*s])` pair for draw `index`. The HR crop
/// comes from the policy's window; when that window cannot hold it the crop
/// falls back to the whole image.
pub fn make_training_pair(
    img: &ImageRecord,
    policy: &CropPolicy,
    spec: &DegradationSpec,
    index: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = img.dims();
    let hr_side = policy.patch_size * spec.scale;
    let win = policy.window(h, w, policy.patch_size)?;
    let hr_win = if win.height >= hr_side && win.width >= hr_side {
        policy.patch_window(h, w, hr_side, index)?
    } else {
        log::warn!(
            "{}: crop window {}x{} cannot hold a {hr_side}x{hr_side} patch; cropping from the full image",
            img.path.display(),
            win.height,
            win.width
        );
        let fallback = CropPolicy {
            mode: CropMode::RandomOnly,
            ..*policy
        };
        fallback.patch_window(h, w, hr_side, index)?
    };
    let mut hr = crop(&img.image, hr_win);
    if policy.augment {
        let code = seeded(derive_seed(policy.seed, index), 4).random_range(0..8u32);
        hr = dihedral(&hr, code);
    }
    let hr4 = hr.reshape(&[1, 3, hr_side, hr_side])?;
    let (lr, _) = degrade_item(&hr4, spec, index)?;
    let p = policy.patch_size;
    Ok((lr.reshape(&[3, p, p])?, hr4.reshape(&[3, hr_side, hr_side])?))
}

/// Batch `iteration` of size `batch`: sample `k = iteration * batch + b`
/// picks its image and crop from `(seed, k)` alone, so any batch can be
/// regenerated without replaying earlier ones.
pub fn make_batch(
    records: &[ImageRecord],
    policy: &CropPolicy,
    spec: &DegradationSpec,
    batch: usize,
    iteration: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    for b in 0..batch {
        let k = iteration * batch as u64 + b as u64;
        let pick = seeded(derive_seed(policy.seed, k), 5).random_range(0..records.len());
        let item_spec = spec.with_seed(derive_seed(spec.seed, k));
        let (lr, hr) = make_training_pair(&records[pick], policy, &item_spec, k)?;
        let (ls, hs) = (with_batch(lr.shape()), with_batch(hr.shape()));
        lrs.push(lr.reshape(&ls)?);
        hrs.push(hr.reshape(&hs)?);
    }
    Ok((Tensor::stack_batch(&lrs)?, Tensor::stack_batch(&hrs)?))
}

fn with_batch(shape: &[usize]) -> Vec<usize> {
    std::iter::once(1).chain(shape.iter().copied()).collect()
}

/// Every `.png` under `dir` (recursively), sorted.
pub fn find_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Outcome of indexing a directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PrepareReport {
    pub accepted: Vec<PathBuf>,
    /// `(path, reason)` for every rejected file.
    pub rejected: Vec<(PathBuf, String)>,
}

/// Validates every PNG under `dir` (decodable, at least
/// `MIN_IMAGE_SIDE` per side).
pub fn prepare_data(dir: &Path) -> Result<PrepareReport> {
    let mut report = PrepareReport::default();
    for path in find_pngs(dir)? {
        match ImageRecord::load(&path) {
            Ok(_) => report.accepted.push(path),
            Err(e) => report.rejected.push((path, e.to_string())),
        }
    }
    Ok(report)
}

/// Dataset manifest: a JSON array of image paths.
pub fn write_manifest(path: &Path, images: &[PathBuf]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(images)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Loads every image of a manifest.
pub fn load_records(paths: &[PathBuf]) -> Result<Vec<ImageRecord>> {
    paths.iter().map(|p| ImageRecord::load(p)).collect()
}
