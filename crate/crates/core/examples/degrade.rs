//! Synthesizes blurred, downsampled training and test inputs from an HR image.
//!
//! `cargo run --release --example degrade [out_dir]`

use std::path::PathBuf;

use nlcunet::data::save_png;
use nlcunet::degradation::{blur_downsample, degrade_item, test_kernel_grid, DegradationSpec, KernelParams};
use nlcunet::synth::{synthetic_image, SynthStyle};

fn main() -> nlcunet::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("nlcunet-degrade"));
    std::fs::create_dir_all(&out)?;
    let hr = synthetic_image(128, 128, 1, SynthStyle::Texture).reshape(&[1, 3, 128, 128])?;
    save_png(&out.join("hr.png"), &hr)?;

    // training-time sampling: a fresh kernel for every item index
    let iso = DegradationSpec::config1(4, 42)?;
    let aniso = DegradationSpec::config2(4, 42)?.with_noise(10.0);
    for (name, spec) in [("iso", iso), ("aniso", aniso)] {
        for index in 0..3 {
            let (lr, kernel) = degrade_item(&hr, &spec, index)?;
            println!("{name} #{index}: {:?} -> {:?}", kernel.params(), lr.shape());
            save_png(&out.join(format!("{name}_{index}.png")), &lr)?;
        }
    }

    // evaluation-time grid: eight fixed isotropic widths
    for (i, kernel) in test_kernel_grid(4)?.iter().enumerate() {
        if let KernelParams::Isotropic { sigma } = kernel.params() {
            save_png(&out.join(format!("grid_{i}.png")), &blur_downsample(&hr, kernel, 4)?)?;
            println!("grid {i}: width {sigma:.1}");
        }
    }
    println!("wrote images to {}", out.display());
    Ok(())
}
