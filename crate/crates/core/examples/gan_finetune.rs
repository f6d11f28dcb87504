//! Adversarial fine-tuning of a generator against the spectrally normalized
//! discriminator.
//!
//! `cargo run --release --example gan_finetune [iterations]`

use nlcunet::data::{make_batch, CropPolicy, ImageRecord};
use nlcunet::degradation::DegradationSpec;
use nlcunet::model::{Discriminator, DiscriminatorConfig, Generator, ModelConfig};
use nlcunet::synth::{synthetic_image, SynthStyle};
use nlcunet::training::{
    discriminator_accuracy, super_resolve, train_gan_stage, GanState, Stage, TrainConfig, TrainContext, TrainData,
};

fn main() -> nlcunet::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let records: Vec<ImageRecord> = (0..8)
        .map(|s| ImageRecord::new(format!("synthetic{s}").into(), synthetic_image(96, 96, s, SynthStyle::Texture)))
        .collect::<nlcunet::Result<_>>()?;
    let policy = CropPolicy {
        patch_size: 12,
        seed: 2,
        ..CropPolicy::default()
    };
    let spec = DegradationSpec::config1(2, 2)?;
    let generator = Generator::new(ModelConfig {
        base_channels: 8,
        ..ModelConfig::tiny(2)
    })?;
    let disc_cfg = DiscriminatorConfig {
        base_channels: 8,
        ..DiscriminatorConfig::default()
    };
    let disc = Discriminator::new(disc_cfg)?;
    let config = TrainConfig {
        stage: Stage::Gan,
        iterations,
        batch: 2,
        validate_every: u64::MAX,
        checkpoint_every: u64::MAX,
        discriminator: disc_cfg,
        seed: 2,
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
        validation: None,
        extractor: None,
        output: None,
    };
    let mut state = GanState::from_generator(generator.init(2), &disc, config.seed);
    let rows = train_gan_stage(&ctx, &disc, &mut state)?;
    for row in rows.iter().filter(|r| r.iteration % 50 == 0) {
        if let (Some(loss), Some(d)) = (row.loss, row.disc_loss) {
            println!(
                "iteration {:>4}: l1 {:.4} adv {:.4} total {:.4} | discriminator {:.4}",
                row.iteration, loss.l1, loss.adv, loss.total, d
            );
        }
    }

    // held-out batch: does the discriminator tell real from generated?
    let (lr, hr) = make_batch(&records, &CropPolicy { seed: 77, ..policy }, &spec, 4, 0)?;
    let fake = super_resolve(&generator, &state.generator, &lr)?;
    let acc = discriminator_accuracy(&disc, &state.discriminator, &state.spectral, &hr, &fake)?;
    println!("per-pixel discriminator accuracy on held-out patches: {acc:.3}");
    Ok(())
}
