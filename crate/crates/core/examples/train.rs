//! PSNR-stage training on a synthetic corpus, then inference with the saved
//! checkpoint.
//!
//! `cargo run --release --example train [iterations] [out_dir]`

use std::path::PathBuf;

use nlcunet::data::{save_png, CropPolicy, ImageRecord};
use nlcunet::degradation::DegradationSpec;
use nlcunet::model::{load_generator, Generator, ModelConfig};
use nlcunet::synth::{synthetic_image, SynthStyle};
use nlcunet::training::{
    super_resolve, train_psnr_stage, PsnrState, TrainConfig, TrainContext, TrainData, ValidationSet, CHECKPOINT_FILE,
};

fn main() -> nlcunet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("nlcunet-train"));

    let records: Vec<ImageRecord> = (0..16)
        .map(|s| ImageRecord::new(format!("synthetic{s}").into(), synthetic_image(128, 128, s, SynthStyle::Texture)))
        .collect::<nlcunet::Result<_>>()?;
    let held: Vec<ImageRecord> = (100..104)
        .map(|s| ImageRecord::new(format!("held{s}").into(), synthetic_image(128, 128, s, SynthStyle::Texture)))
        .collect::<nlcunet::Result<_>>()?;
    let policy = CropPolicy {
        patch_size: 16,
        seed: 1,
        ..CropPolicy::default()
    };
    let spec = DegradationSpec::config1(4, 1)?;
    let validation = ValidationSet::sample(&held, &policy, &spec, 4, 1)?;

    let generator = Generator::new(ModelConfig::tiny(4))?;
    let config = TrainConfig {
        iterations,
        validate_every: 100,
        checkpoint_every: 100,
        seed: 1,
        ..TrainConfig::default()
    };
    let ctx = TrainContext {
        generator: &generator,
        config: &config,
        data: TrainData {
            records: &records,
            policy,
            spec,
        },
        validation: Some(&validation),
        extractor: None,
        output: Some(&out),
    };
    let mut state = PsnrState::new(generator.init(config.seed));
    for row in train_psnr_stage(&ctx, &mut state)? {
        if let Some(v) = row.validation {
            println!("iteration {:>5}: validation L1 {:.5}, Y-PSNR {:.3} dB", row.iteration, v.l1, v.psnr);
        }
    }

    let (model, checkpoint) = load_generator(&out.join(CHECKPOINT_FILE))?;
    let restored = Generator::new(model)?;
    let (lr, _) = &validation.pairs[0];
    save_png(&out.join("sr.png"), &super_resolve(&restored, &checkpoint.params, lr)?)?;
    println!("checkpoint, log and sample output in {}", out.display());
    Ok(())
}
