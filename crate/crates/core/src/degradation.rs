//! Synthetic degradation `lr = (hr * k) downsampled + n`: Gaussian blur
//! kernels, true convolution, antialiased bicubic downsampling and additive
//! white Gaussian noise.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Gaussian};
use crate::tensor::{bicubic_resize_tensor, Padding, Scalar, Tape, Tensor};

/// How a kernel was generated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelParams {
    Delta,
    /// Supplied by the caller.
    Custom,
    Isotropic { sigma: f64 },
    Anisotropic { sigma1: f64, sigma2: f64, theta: f64 },
}

/// Normalized square blur kernel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    values: Vec<f64>,
    params: KernelParams,
}

impl BlurKernel {
    /// Unit impulse at the centre.
    pub fn delta(size: usize) -> Result<Self> {
        check_size(size)?;
        let mut values = vec![0.0; size * size];
        values[size * size / 2] = 1.0;
        Ok(Self {
            size,
            values,
            params: KernelParams::Delta,
        })
    }

    /// A caller-supplied `size x size` kernel, normalized to sum 1.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        check_size(size)?;
        if values.len() != size * size {
            return Err(Error::shape("blur_kernel", "values", format!("need {} values, got {}", size * size, values.len())));
        }
        let total: f64 = values.iter().sum();
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) || !(total > 0.0) {
            return Err(Error::InvalidArgument("kernel values must be nonnegative with a positive sum".into()));
        }
        Ok(Self {
            size,
            values: values.into_iter().map(|v| v / total).collect(),
            params: KernelParams::Custom,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    fn from_density(size: usize, params: KernelParams, density: impl Fn(f64, f64) -> f64) -> Self {
        let c = (size / 2) as f64;
        let mut values: Vec<f64> = (0..size * size)
            .map(|i| density((i % size) as f64 - c, (i / size) as f64 - c))
            .collect();
        let total: f64 = values.iter().sum();
        values.iter_mut().for_each(|v| *v /= total);
        Self { size, values, params }
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {size}")));
    }
    Ok(())
}

fn check_width(name: &str, sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} must be positive, got {sigma}")));
    }
    Ok(())
}

/// `k(x, y) ~ exp(-(x^2 + y^2) / (2 sigma^2))` about the centre.
pub fn gaussian_kernel_iso(sigma: f64, size: usize) -> Result<BlurKernel> {
    check_width("sigma", sigma)?;
    check_size(size)?;
    let inv = 1.0 / (2.0 * sigma * sigma);
    Ok(BlurKernel::from_density(size, KernelParams::Isotropic { sigma }, |x, y| {
        (-(x * x + y * y) * inv).exp()
    }))
}

/// `k(v) ~ exp(-v^T S^-1 v / 2)` with `S = R(theta) diag(s1^2, s2^2) R(theta)^T`.
pub fn gaussian_kernel_aniso(sigma1: f64, sigma2: f64, theta: f64, size: usize) -> Result<BlurKernel> {
    check_width("sigma1", sigma1)?;
    check_width("sigma2", sigma2)?;
    check_size(size)?;
    let (s, c) = theta.sin_cos();
    let (a, b) = (1.0 / (sigma1 * sigma1), 1.0 / (sigma2 * sigma2));
    let params = KernelParams::Anisotropic { sigma1, sigma2, theta };
    Ok(BlurKernel::from_density(size, params, |x, y| {
        // coordinates along the rotated principal axes
        let u = c * x + s * y;
        let w = -s * x + c * y;
        (-0.5 * (u * u * a + w * w * b)).exp()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMode {
    /// Isotropic kernels, width uniform in `sigma_range`.
    Config1,
    /// Anisotropic kernels, both widths uniform in `sigma_range`, angle
    /// uniform in `theta_range`.
    Config2,
    /// No blur and no noise: plain bicubic downsampling.
    Identity,
}

/// Reading of the anisotropic test-set range `0.175 .. 2.5`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthReading {
    /// The range bounds the kernel width sigma.
    Sigma,
    /// The range bounds the variance sigma^2.
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub mode: DegradationMode,
    pub scale: usize,
    pub kernel_size: usize,
    pub sigma_range: [f64; 2],
    #[serde(default = "full_turn")]
    pub theta_range: [f64; 2],
    /// Noise level on the 0..255 scale.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn full_turn() -> [f64; 2] {
    [-PI, PI]
}

fn check_scale(scale: usize) -> Result<()> {
    if !(2..=4).contains(&scale) {
        return Err(Error::Config(format!("scale must be 2, 3 or 4, got {scale}")));
    }
    Ok(())
}

impl DegradationSpec {
    /// Isotropic blur, size 21, width in `[0.2, scale]` (`[0.2, 2]`, `[0.2, 3]`,
    /// `[0.2, 4]`).
    pub fn config1(scale: usize, seed: u64) -> Result<Self> {
        check_scale(scale)?;
        Ok(Self {
            mode: DegradationMode::Config1,
            scale,
            kernel_size: 21,
            sigma_range: [0.2, scale as f64],
            theta_range: full_turn(),
            noise_sigma: 0.0,
            seed,
        })
    }

    /// Anisotropic blur with widths in `(0.6, 5)`; kernel 11 at x2 and 31 at
    /// x4. Defined for x2 and x4 only.
    pub fn config2(scale: usize, seed: u64) -> Result<Self> {
        let kernel_size = match scale {
            2 => 11,
            4 => 31,
            _ => return Err(Error::Config(format!("config2 is defined for scales 2 and 4, got {scale}"))),
        };
        Ok(Self {
            mode: DegradationMode::Config2,
            scale,
            kernel_size,
            sigma_range: [0.6, 5.0],
            theta_range: full_turn(),
            noise_sigma: 0.0,
            seed,
        })
    }

    /// The anisotropic test-set variant, widths from `0.175 .. 2.5` under the
    /// chosen reading.
    pub fn config2_test(scale: usize, seed: u64, reading: WidthReading) -> Result<Self> {
        let mut spec = Self::config2(scale, seed)?;
        spec.sigma_range = match reading {
            WidthReading::Sigma => [0.175, 2.5],
            WidthReading::Variance => [0.175f64.sqrt(), 2.5f64.sqrt()],
        };
        Ok(spec)
    }

    pub fn identity(scale: usize) -> Result<Self> {
        check_scale(scale)?;
        Ok(Self {
            mode: DegradationMode::Identity,
            scale,
            kernel_size: 1,
            sigma_range: [0.0, 0.0],
            theta_range: [0.0, 0.0],
            noise_sigma: 0.0,
            seed: 0,
        })
    }

    pub fn with_noise(mut self, noise_sigma: f64) -> Self {
        self.noise_sigma = noise_sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.mode == DegradationMode::Identity {
            return Ok(());
        }
        check_size(self.kernel_size).map_err(|e| Error::Config(e.to_string()))?;
        let [lo, hi] = self.sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("sigma_range must satisfy 0 < lo <= hi, got {:?}", self.sigma_range)));
        }
        let [t0, t1] = self.theta_range;
        if !(t0 <= t1 && t0.is_finite() && t1.is_finite()) {
            return Err(Error::Config(format!("bad theta_range {:?}", self.theta_range)));
        }
        Ok(())
    }

    /// Kernel for item `index`; depends only on `(seed, index)`.
    pub fn sample_kernel(&self, index: u64) -> Result<BlurKernel> {
        self.validate()?;
        let mut rng = seeded(derive_seed(self.seed, index), 1);
        let mut width = || {
            let [lo, hi] = self.sigma_range;
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        match self.mode {
            DegradationMode::Identity => BlurKernel::delta(1),
            DegradationMode::Config1 => gaussian_kernel_iso(width(), self.kernel_size),
            DegradationMode::Config2 => {
                let (s1, s2) = (width(), width());
                let [t0, t1] = self.theta_range;
                let theta = if t0 == t1 { t0 } else { rng.random_range(t0..=t1) };
                gaussian_kernel_aniso(s1, s2, theta, self.kernel_size)
            }
        }
    }
}

/// Blurs every channel with `kernel` by true convolution (flipped kernel),
/// reflect padding.
pub fn blur<T: Scalar>(img: &Tensor<T>, kernel: &BlurKernel) -> Result<Tensor<T>> {
    let [_, c, _, _] = img.dims4()?;
    let k = kernel.size();
    if k == 1 {
        return Ok(img.map(|v| v * T::lit(kernel.values()[0])));
    }
    let flipped: Vec<T> = (0..c)
        .flat_map(|_| kernel.values().iter().rev().map(|&v| T::lit(v)))
        .collect();
    let tape = Tape::new();
    let w = tape.constant(Tensor::new(&[c, 1, k, k], flipped)?);
    let out = tape.constant(img.clone()).depthwise_conv2d(&w, Padding::reflect(k / 2))?;
    Ok(out.value().clone())
}

/// Adds `N(0, (sigma/255)^2)` noise drawn from the stream of `seed`.
pub fn add_awgn<T: Scalar>(img: &mut Tensor<T>, noise_sigma: f64, seed: u64) {
    let std = noise_sigma / 255.0;
    let mut g = Gaussian::new(seeded(seed, 2));
    img.data_mut().iter_mut().for_each(|v| *v += T::lit(std * g.sample()));
}

/// Noiseless degradation with a given kernel: blur, then antialiased bicubic
/// downsampling by `scale`.
pub fn blur_downsample<T: Scalar>(hr: &Tensor<T>, kernel: &BlurKernel, scale: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = hr.dims4()?;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(
            "degrade",
            "spatial",
            format!("{h}x{w} is not divisible by scale {scale}"),
        ));
    }
    bicubic_resize_tensor(&blur(hr, kernel)?, h / scale, w / scale, true)
}

/// Degrades item `index` of a dataset: blur with the sampled kernel,
/// antialiased bicubic downsampling by the scale, then noise. Clamping to
/// `[0, 1]` applies only when noise is added, so the noiseless path is exactly
/// blur followed by the resizer.
pub fn degrade_item<T: Scalar>(hr: &Tensor<T>, spec: &DegradationSpec, index: u64) -> Result<(Tensor<T>, BlurKernel)> {
    let kernel = spec.sample_kernel(index)?;
    let mut lr = blur_downsample(hr, &kernel, spec.scale)?;
    if spec.noise_sigma > 0.0 {
        add_awgn(&mut lr, spec.noise_sigma, derive_seed(spec.seed, index));
        lr = lr.map(|v| v.max(T::zero()).min(T::one()));
    }
    Ok((lr, kernel))
}

/// Degrades a batch; item `i` uses index `i`.
pub fn degrade<T: Scalar>(hr: &Tensor<T>, spec: &DegradationSpec) -> Result<(Tensor<T>, Vec<BlurKernel>)> {
    let [n, _, _, _] = hr.dims4()?;
    let mut lrs = Vec::with_capacity(n);
    let mut kernels = Vec::with_capacity(n);
    for i in 0..n {
        let (lr, k) = degrade_item(&hr.batch_item(i), spec, i as u64)?;
        lrs.push(lr);
        kernels.push(k);
    }
    Ok((Tensor::stack_batch(&lrs)?, kernels))
}

/// Width range of the isotropic test grid at `scale`.
pub fn test_grid_range(scale: usize) -> Result<[f64; 2]> {
    match scale {
        2 => Ok([0.8, 1.6]),
        3 => Ok([1.35, 2.4]),
        4 => Ok([1.8, 3.2]),
        _ => Err(Error::Config(format!("scale must be 2, 3 or 4, got {scale}"))),
    }
}

/// Eight isotropic size-21 kernels with widths evenly spaced over the test
/// range, endpoints included.
pub fn test_kernel_grid(scale: usize) -> Result<Vec<BlurKernel>> {
    let [lo, hi] = test_grid_range(scale)?;
    (0..8)
        .map(|i| gaussian_kernel_iso(lo + (hi - lo) * i as f64 / 7.0, 21))
        .collect()
}
