mod common;

use std::path::Path;

use nlcunet::data::{CropPolicy, ImageRecord};
use nlcunet::degradation::DegradationSpec;
use nlcunet::model::{Checkpoint, Discriminator, DiscriminatorConfig, Generator, ModelConfig};
use nlcunet::training::{
    adam_step, combine, discriminator_accuracy, lr_schedule, super_resolve, total_loss, train_gan_stage,
    train_psnr_stage, validate, AdamConfig, AdamState, FeatureExtractor, GanState, LossWeights, PsnrState, Stage,
    StepRecord, TrainConfig, TrainContext, TrainData, ValidationSet, CHECKPOINT_FILE, LOG_FILE,
};
use nlcunet::{Error, ParamStore, Result, Tape, Tensor, Var};
use proptest::prelude::*;

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::scalar(v));
    s
}

#[test]
fn adam_first_step_closed_form() {
    for g in [0.5, -3.0, 1e-3] {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(g)], &mut st, 0.01, 1, &AdamConfig::default()).unwrap();
        let delta = p.get("w").unwrap().data()[0] - 1.0;
        // m_hat = g, v_hat = g^2: the step is lr * |g| / (|g| + eps)
        let expect = -0.01 * g / (g.abs() + 1e-8);
        assert!((delta - expect).abs() < 1e-15, "{delta} {expect}");
        assert_eq!(delta.signum(), -g.signum());
    }
}

#[test]
fn adam_minimizes_quadratic_bowl() {
    let mut p = scalar_store(1.0);
    let mut st = AdamState::new(&p);
    for t in 1..=500 {
        let tape = Tape::new();
        let b = p.bind(&tape);
        let w = b.get("w").unwrap();
        let loss = w.mul(w).unwrap().sum();
        let g = b.gradients(&loss.backward().unwrap());
        adam_step(&mut p, &g, &mut st, 1e-2, t, &AdamConfig::default()).unwrap();
    }
    let w = p.get("w").unwrap().data()[0];
    assert!(w.abs() < 1e-3, "{w}");
}

#[test]
fn adam_zero_gradient_and_nan_diagnostic() {
    let mut p = scalar_store(0.25);
    p.insert("conv.weight", Tensor::<f64>::ones(&[2, 2]));
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::scalar(0.0), Tensor::zeros(&[2, 2])], &mut st, 0.1, 1, &AdamConfig::default())
        .unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 0.25);
    let bad = Tensor::new(&[2, 2], vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
    let err = adam_step(&mut p, &[Tensor::scalar(1.0), bad], &mut st, 0.1, 2, &AdamConfig::default()).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("conv.weight")), "{err}");
    assert_eq!(p.get("w").unwrap().data()[0], 0.25, "aborted step leaves parameters alone");
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * b;
    assert!(close(lr_schedule(&cfg, 0), 4e-4));
    assert!(close(lr_schedule(&cfg, 299_999), 4e-4));
    assert!(close(lr_schedule(&cfg, 300_000), 2e-4));
    assert!(close(lr_schedule(&cfg, 1_200_000), 2.5e-5));
    let gan = TrainConfig {
        stage: Stage::Gan,
        ..TrainConfig::default()
    };
    for it in [0, 7, 300_000, 6_000_000] {
        assert_eq!(lr_schedule(&gan, it), 1e-4);
    }
    let toy = TrainConfig {
        decay_every: 10,
        ..TrainConfig::default()
    };
    assert_eq!(lr_schedule(&toy, 25), toy.psnr_lr / 4.0);
}

proptest! {
    #[test]
    fn lr_schedule_is_nonincreasing_step_function(decay in 1u64..1000, it in 0u64..100_000) {
        let cfg = TrainConfig { decay_every: decay, ..TrainConfig::default() };
        let (a, b) = (lr_schedule(&cfg, it), lr_schedule(&cfg, it + 1));
        prop_assert!(b <= a);
        if (it + 1) % decay == 0 {
            prop_assert_eq!(b, a / 2.0);
        } else {
            prop_assert_eq!(b, a);
        }
    }
}

#[test]
fn config_validation_and_serde() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig {
            adam: AdamConfig {
                beta1: 1.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        },
        TrainConfig {
            weights: LossWeights {
                adv: -0.1,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        },
        TrainConfig {
            batch: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"stage": "gan", "weights": {"adv": 0.5}}"#).unwrap();
    assert_eq!((c.stage, c.weights.adv, c.weights.l1), (Stage::Gan, 0.5, 1.0));
}

/// Average-pooling pyramid standing in for a pretrained network.
struct Pyramid;

impl FeatureExtractor<f64> for Pyramid {
    fn features(&self, img: &Var<f64>) -> Result<Vec<Var<f64>>> {
        let mut out = vec![img.clone()];
        let mut cur = img.clone();
        for _ in 0..4 {
            let [_, _, h, w] = cur.value().dims4()?;
            cur = cur.bicubic_resize(h.div_ceil(2), w.div_ceil(2), true)?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}

struct Broken;

impl FeatureExtractor<f64> for Broken {
    fn features(&self, img: &Var<f64>) -> Result<Vec<Var<f64>>> {
        Ok(vec![img.clone(); 4])
    }
}

#[test]
fn loss_arithmetic() {
    let w = LossWeights::default();
    assert!((combine(&w, 0.2, 0.3, 1.0) - 0.6).abs() < 1e-15);
    let tape = Tape::new();
    let hr = tape.constant(common::random(&[1, 3, 8, 8], 1));
    let (l, c) = total_loss(&hr, &hr, None, None, &w).unwrap();
    assert_eq!(l.value().data()[0], 0.0);
    assert_eq!(c.total, 0.0);
    let sr = tape.constant(hr.value().map(|v| v + 0.5));
    let (_, c) = total_loss(&sr, &hr, None, None, &w).unwrap();
    assert!((c.l1 - 0.5).abs() < 1e-12 && (c.total - 0.5).abs() < 1e-12);
    let other = tape.constant(Tensor::zeros(&[1, 3, 8, 4]));
    assert!(total_loss(&other, &hr, None, None, &w).is_err());
}

#[test]
fn perceptual_term_and_recombination() {
    let tape = Tape::new();
    let hr = tape.constant(common::random(&[1, 3, 16, 16], 2));
    let sr = tape.constant(common::random(&[1, 3, 16, 16], 3));
    let logits = tape.constant(common::random(&[1, 1, 16, 16], 4));
    let w = LossWeights::default();
    let (total, c) = total_loss(&sr, &hr, Some(&logits), Some(&Pyramid), &w).unwrap();
    let fs = Pyramid.features(&sr).unwrap();
    let fh = Pyramid.features(&hr).unwrap();
    let manual: f64 = fs
        .iter()
        .zip(&fh)
        .zip([0.1, 0.1, 1.0, 1.0, 1.0])
        .map(|((a, b), k)| {
            k * a.value().data().iter().zip(b.value().data()).map(|(x, y)| (x - y).abs()).sum::<f64>()
                / a.value().numel() as f64
        })
        .sum();
    assert!((c.perc - manual).abs() < 1e-12);
    let adv: f64 = logits.value().data().iter().map(|z| (1.0 + (-z).exp()).ln()).sum::<f64>() / 256.0;
    assert!((c.adv - adv).abs() < 1e-12);
    assert!((combine(&w, c.l1, c.perc, c.adv) - total.value().data()[0]).abs() < 1e-6);
    assert!(matches!(total_loss(&sr, &hr, None, Some(&Broken), &w), Err(Error::Config(_))));
}

// --- loop-level tests on a small synthetic setup ------------------------------

fn texture(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let f = 0.15 + 0.05 * (seed % 5) as f32;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, r, x) = (i / (h * w), (i / w) % h, i % w);
        // hard edges, which bicubic upsampling cannot reproduce
        let v = (r as f32 * f + c as f32).sin() * (x as f32 * f * 0.7).cos();
        if v > 0.0 { 0.8 } else { 0.2 }
    })
}

fn records() -> Vec<ImageRecord> {
    (0..3).map(|s| ImageRecord::new(format!("t{s}").into(), texture(64, 80, s)).unwrap()).collect()
}

fn small_model() -> Generator {
    Generator::new(ModelConfig {
        base_channels: 8,
        unet_levels: 1,
        blocks_per_level: 1,
        scale: 2,
        ca_reduction: 4,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn data(records: &[ImageRecord]) -> TrainData<'_> {
    TrainData {
        records,
        policy: CropPolicy {
            patch_size: 8,
            seed: 3,
            ..CropPolicy::default()
        },
        spec: DegradationSpec::config1(2, 5).unwrap(),
    }
}

fn toy_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: 2,
        psnr_lr: 1e-3,
        gan_lr: 1e-3,
        validate_every: 5,
        checkpoint_every: 4,
        discriminator: DiscriminatorConfig {
            base_channels: 4,
            ..DiscriminatorConfig::default()
        },
        seed: 1,
        ..TrainConfig::default()
    }
}

fn losses(records: &[StepRecord]) -> Vec<u64> {
    records.iter().filter_map(|r| r.loss.map(|l| l.total.to_bits())).collect()
}

fn psnr_run(gen: &Generator, cfg: &TrainConfig, recs: &[ImageRecord], out: Option<&Path>, init: u64) -> (PsnrState, Vec<StepRecord>) {
    let val = ValidationSet::sample(recs, &data(recs).policy, &data(recs).spec, 2, 9).unwrap();
    let ctx = TrainContext {
        generator: gen,
        config: cfg,
        data: data(recs),
        validation: Some(&val),
        extractor: None,
        output: out,
    };
    let mut st = PsnrState::new(gen.init(init));
    let r = train_psnr_stage(&ctx, &mut st).unwrap();
    (st, r)
}

#[test]
fn psnr_stage_is_deterministic_and_logs() {
    let gen = small_model();
    let recs = records();
    let dir = tempfile::tempdir().unwrap();
    let (a, ra) = psnr_run(&gen, &toy_config(10), &recs, Some(dir.path()), 1);
    let (b, rb) = psnr_run(&gen, &toy_config(10), &recs, None, 1);
    assert_eq!(losses(&ra), losses(&rb));
    assert_eq!(ra.len(), 11, "ten steps and a closing validation row");
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.data(), y.data());
    }
    let validated: Vec<u64> = ra.iter().filter(|r| r.validation.is_some()).map(|r| r.iteration).collect();
    assert_eq!(validated, vec![0, 5, 10]);
    for r in &ra {
        if let Some(l) = r.loss {
            assert!((combine(&toy_config(1).weights, l.l1, l.perc, l.adv) - l.total).abs() < 1e-6);
        }
    }
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iteration,lr,loss,l1,perc,adv,disc_loss,val_l1,val_psnr");
    assert_eq!(lines.len(), 12);
    assert!(lines[1].starts_with("0,0.001,"));
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.iteration, 10);
    // a different seed gives a different trace
    let (_, rc) = psnr_run(&gen, &toy_config(10), &recs, None, 2);
    assert_ne!(losses(&ra), losses(&rc));
}

#[test]
fn resume_reproduces_the_next_step() {
    let gen = small_model();
    let recs = records();
    let (_, full) = psnr_run(&gen, &toy_config(9), &recs, None, 1);
    let dir = tempfile::tempdir().unwrap();
    let (st, _) = psnr_run(&gen, &toy_config(6), &recs, Some(dir.path()), 1);
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.iteration, 6);
    let mut resumed = PsnrState::from_checkpoint(ck).unwrap();
    for ((_, x), (_, y)) in resumed.params.iter().zip(st.params.iter()) {
        assert_eq!(x.data(), y.data());
    }
    let cfg = toy_config(9);
    let val = ValidationSet::sample(&recs, &data(&recs).policy, &data(&recs).spec, 2, 9).unwrap();
    let ctx = TrainContext {
        generator: &gen,
        config: &cfg,
        data: data(&recs),
        validation: Some(&val),
        extractor: None,
        output: None,
    };
    let tail = train_psnr_stage(&ctx, &mut resumed).unwrap();
    assert_eq!(losses(&tail), losses(&full)[6..].to_vec());
}

struct NanFeatures;

impl FeatureExtractor<f32> for NanFeatures {
    fn features(&self, img: &Var<f32>) -> Result<Vec<Var<f32>>> {
        Ok(vec![img.scale(f32::NAN); 5])
    }
}

#[test]
fn non_finite_loss_halts_and_keeps_last_good_checkpoint() {
    let gen = small_model();
    let recs = records();
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(5);
    let ctx = TrainContext {
        generator: &gen,
        config: &cfg,
        data: data(&recs),
        validation: None,
        extractor: Some(&NanFeatures),
        output: Some(dir.path()),
    };
    let init = gen.init::<f32>(1);
    let mut st = PsnrState::new(init.clone());
    let err = train_psnr_stage(&ctx, &mut st).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.iteration, 0);
    for ((_, x), (_, y)) in ck.params.iter().zip(init.iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn stage_mismatch_is_a_config_error() {
    let gen = small_model();
    let recs = records();
    let cfg = TrainConfig {
        stage: Stage::Gan,
        ..toy_config(1)
    };
    let ctx = TrainContext {
        generator: &gen,
        config: &cfg,
        data: data(&recs),
        validation: None,
        extractor: None,
        output: None,
    };
    let mut st = PsnrState::new(gen.init(1));
    assert!(matches!(train_psnr_stage(&ctx, &mut st), Err(Error::Config(_))));
}

fn gan_config(iterations: u64, adv: f64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Gan,
        weights: LossWeights {
            adv,
            ..LossWeights::default()
        },
        decay_every: u64::MAX,
        ..toy_config(iterations)
    }
}

#[test]
fn gan_stage_without_adversarial_weight_matches_psnr_stage() {
    let gen = small_model();
    let recs = records();
    let psnr_cfg = TrainConfig {
        decay_every: u64::MAX,
        ..toy_config(6)
    };
    let (psnr_state, psnr_rec) = psnr_run(&gen, &psnr_cfg, &recs, None, 1);

    let gcfg = gan_config(6, 0.0);
    let disc = Discriminator::new(gcfg.discriminator).unwrap();
    let ctx = TrainContext {
        generator: &gen,
        config: &gcfg,
        data: data(&recs),
        validation: None,
        extractor: None,
        output: None,
    };
    let mut gs = GanState::from_generator(gen.init(1), &disc, 4);
    let gan_rec = train_gan_stage(&ctx, &disc, &mut gs).unwrap();
    for ((_, x), (_, y)) in gs.generator.iter().zip(psnr_state.params.iter()) {
        assert_eq!(x.data(), y.data());
    }
    let l1 = |r: &[StepRecord]| r.iter().filter_map(|s| s.loss.map(|l| l.l1)).collect::<Vec<_>>();
    assert_eq!(l1(&gan_rec), l1(&psnr_rec));
    assert!(gan_rec.iter().filter(|r| r.loss.is_some()).all(|r| r.disc_loss.is_some()));
}

#[test]
fn gan_stage_starts_from_psnr_checkpoint_and_resumes() {
    let gen = small_model();
    let recs = records();
    let dir = tempfile::tempdir().unwrap();
    let (_, psnr_rec) = psnr_run(&gen, &toy_config(5), &recs, Some(dir.path()), 1);
    let final_val = psnr_rec.last().unwrap().validation.unwrap();

    let gcfg = gan_config(4, 0.1);
    let disc = Discriminator::new(gcfg.discriminator).unwrap();
    let val = ValidationSet::sample(&recs, &data(&recs).policy, &data(&recs).spec, 2, 9).unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let mut gs = GanState::from_checkpoint(ck, &disc, 4).unwrap();
    assert_eq!(gs.iteration, 0);
    let gan_dir = tempfile::tempdir().unwrap();
    let ctx = TrainContext {
        generator: &gen,
        config: &gcfg,
        data: data(&recs),
        validation: Some(&val),
        extractor: None,
        output: Some(gan_dir.path()),
    };
    let rec = train_gan_stage(&ctx, &disc, &mut gs).unwrap();
    let first_val = rec[0].validation.unwrap();
    assert!((first_val.l1 - final_val.l1).abs() < 1e-6);

    // resume from the saved GAN checkpoint reproduces a longer run
    let saved = Checkpoint::load(&gan_dir.path().join(CHECKPOINT_FILE)).unwrap();
    let mut resumed = GanState::from_checkpoint(saved, &disc, 4).unwrap();
    assert_eq!(resumed.iteration, 4);
    assert_eq!(resumed.spectral, gs.spectral);
    let longer = gan_config(6, 0.1);
    let ctx_long = TrainContext {
        config: &longer,
        output: None,
        ..ctx
    };
    let tail = train_gan_stage(&ctx_long, &disc, &mut resumed).unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let mut straight = GanState::from_checkpoint(ck, &disc, 4).unwrap();
    let whole = train_gan_stage(&ctx_long, &disc, &mut straight).unwrap();
    assert_eq!(losses(&tail), losses(&whole)[4..].to_vec());
}

#[test]
fn discriminator_learns_to_separate_real_from_fake() {
    let gen = small_model();
    let recs = records();
    let gcfg = TrainConfig {
        validate_every: 0,
        ..gan_config(500, 0.1)
    };
    let disc = Discriminator::new(gcfg.discriminator).unwrap();
    let d = data(&recs);
    let held = ValidationSet::sample(&recs, &d.policy, &d.spec, 4, 77).unwrap();
    let mut gs = GanState::from_generator(gen.init(1), &disc, 4);
    let accuracy = |gs: &GanState| {
        let (mut acc, n) = (0.0, held.len() as f64);
        for (lr, hr) in &held.pairs {
            let fake = super_resolve(&gen, &gs.generator, lr).unwrap();
            acc += discriminator_accuracy(&disc, &gs.discriminator, &gs.spectral, hr, &fake).unwrap();
        }
        acc / n
    };
    let ctx = TrainContext {
        generator: &gen,
        config: &gcfg,
        data: d,
        validation: None,
        extractor: None,
        output: None,
    };
    train_gan_stage(&ctx, &disc, &mut gs).unwrap();
    let after = accuracy(&gs);
    assert!(after > 0.5, "held-out accuracy {after}");
}

#[test]
fn validation_of_zero_tail_model_is_bicubic() {
    let gen = small_model();
    let recs = records();
    let d = data(&recs);
    let set = ValidationSet::sample(&recs, &d.policy, &d.spec, 3, 1).unwrap();
    let params = gen.init::<f32>(1);
    let v = validate(&gen, &params, &set).unwrap();
    let mut expect = 0.0;
    for (lr, hr) in &set.pairs {
        let up = nlcunet::tensor::bicubic_resize_tensor(lr, 16, 16, true).unwrap();
        let up = up.map(|x| x.clamp(0.0, 1.0));
        let ys = nlcunet::metrics::shave(&nlcunet::data::rgb_to_ycbcr_y(&up).unwrap(), 2).unwrap();
        let yh = nlcunet::metrics::shave(&nlcunet::data::rgb_to_ycbcr_y(hr).unwrap(), 2).unwrap();
        expect += nlcunet::metrics::psnr(&ys, &yh).unwrap();
    }
    assert!((v.psnr - expect / 3.0).abs() < 1e-3, "{} vs {}", v.psnr, expect / 3.0);
}
