//! Builds the generator and its ablations, counts parameters and runs a
//! forward pass. The untrained network with the bicubic skip is exactly the
//! bicubic upsampler.
//!
//! `cargo run --release --example generator`

use nlcunet::blocks::AttentionKind;
use nlcunet::metrics::evaluate_rgb;
use nlcunet::model::{Generator, ModelConfig};
use nlcunet::synth::{synthetic_image, SynthStyle};
use nlcunet::tensor::bicubic_resize_tensor;
use nlcunet::training::super_resolve;

fn main() -> nlcunet::Result<()> {
    let full = ModelConfig::default();
    let variants = [
        ("default", full),
        ("tiny", ModelConfig::tiny(4)),
        ("no GDFN", ModelConfig { use_gdfn: false, ..full }),
        ("no layernorm", ModelConfig { use_layernorm: false, ..full }),
        ("flat stack", ModelConfig { use_unet: false, ..full }),
        ("dense attention", ModelConfig { attention: AttentionKind::Dense, ..full }),
    ];
    for (name, cfg) in variants {
        println!("{name:>16}: {:>7} parameters", Generator::new(cfg)?.param_count());
    }

    let generator = Generator::new(ModelConfig::tiny(4))?;
    let params = generator.init::<f32>(0);
    let hr = synthetic_image(96, 80, 5, SynthStyle::Texture);
    let lr = bicubic_resize_tensor(&hr.clone().reshape(&[1, 3, 96, 80])?, 24, 20, true)?;
    let sr = super_resolve(&generator, &params, &lr)?;
    let bic = bicubic_resize_tensor(&lr, 96, 80, true)?;
    let same = sr.data().iter().zip(bic.data()).all(|(a, b)| (a - b).abs() < 1e-6);
    println!("x4 output {:?}, equal to bicubic: {same}", sr.shape());
    let (db, ssim) = evaluate_rgb(&sr.map(|v| v.clamp(0.0, 1.0)).reshape(&[3, 96, 80])?, &hr, 4)?;
    println!("untrained Y-PSNR {db:.2} dB, SSIM {ssim:.4}");
    Ok(())
}
