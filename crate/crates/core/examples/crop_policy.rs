//! Where training patches come from: a centred window first, then a random
//! patch inside it, compared against plain random crops.
//!
//! `cargo run --release --example crop_policy`

use nlcunet::data::{make_batch, CropMode, CropPolicy, ImageRecord};
use nlcunet::degradation::DegradationSpec;
use nlcunet::synth::{synthetic_image, SynthStyle};

fn main() -> nlcunet::Result<()> {
    let (h, w) = (1024, 2048);
    for mode in [CropMode::CenterThenRandom, CropMode::RandomOnly] {
        let policy = CropPolicy {
            mode,
            seed: 9,
            ..CropPolicy::default()
        };
        let window = policy.window(h, w, 256)?;
        println!("{mode:?}: window rows {}..{} cols {}..{}", window.top, window.top + window.height, window.left, window.left + window.width);
        for index in 0..4 {
            let p = policy.patch_window(h, w, 256, index)?;
            println!("  patch {index}: top {} left {}", p.top, p.left);
        }
    }

    let records: Vec<ImageRecord> = (0..4)
        .map(|s| ImageRecord::new(format!("img{s}").into(), synthetic_image(256, 256, s, SynthStyle::CenterSalient)))
        .collect::<nlcunet::Result<_>>()?;
    let policy = CropPolicy {
        center_size: 128,
        patch_size: 16,
        seed: 9,
        ..CropPolicy::default()
    };
    let (lr, hr) = make_batch(&records, &policy, &DegradationSpec::config1(4, 9)?, 4, 0)?;
    println!("batch: lr {:?}, hr {:?}", lr.shape(), hr.shape());
    Ok(())
}
