//! Y-channel PSNR and SSIM of bicubic upsampling over the eight-kernel test
//! grid, grouped by kernel width.
//!
//! `cargo run --release --example evaluate`

use nlcunet::degradation::{blur_downsample, test_kernel_grid, KernelParams};
use nlcunet::metrics::{evaluate_rgb, ImageMetric, MetricReport};
use nlcunet::synth::{synthetic_image, SynthStyle};
use nlcunet::tensor::bicubic_resize_tensor;

fn main() -> nlcunet::Result<()> {
    let scale = 4;
    let mut metrics = Vec::new();
    for seed in 0..3 {
        let hr = synthetic_image(128, 128, seed, SynthStyle::Texture);
        let batch = hr.clone().reshape(&[1, 3, 128, 128])?;
        for (i, kernel) in test_kernel_grid(scale)?.iter().enumerate() {
            let lr = blur_downsample(&batch, kernel, scale)?;
            let up = bicubic_resize_tensor(&lr, 128, 128, true)?.map(|v| v.clamp(0.0, 1.0));
            let (psnr, ssim) = evaluate_rgb(&up.reshape(&[3, 128, 128])?, &hr, scale)?;
            let width = match kernel.params() {
                KernelParams::Isotropic { sigma } => Some(sigma),
                _ => None,
            };
            metrics.push(ImageMetric {
                name: format!("img{seed}_k{i}"),
                psnr,
                ssim,
                kernel_width: width,
            });
        }
    }
    let report = MetricReport::new(scale, metrics);
    print!("{}", report.table());
    println!("{}", serde_json::to_string_pretty(&report.by_kernel_width).expect("report serializes"));
    Ok(())
}
