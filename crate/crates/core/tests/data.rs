mod common;

use nlcunet::data::{
    load_png, make_batch, make_training_pair, prepare_data, read_manifest, rgb_to_ycbcr_y, sample_patch, save_png,
    write_manifest, CropMode, CropPolicy, ImageRecord, Window,
};
use nlcunet::degradation::DegradationSpec;
use nlcunet::tensor::bicubic_resize_tensor;
use nlcunet::Tensor;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn ramp(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, r, x) = (i / (h * w), (i / w) % h, i % w);
        ((r * 7 + x * 3 + c * 50) % 256) as f32 / 255.0
    })
}

fn record(h: usize, w: usize) -> ImageRecord {
    ImageRecord::new("synthetic.png".into(), ramp(h, w)).unwrap()
}

#[test]
fn png_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    let img = ramp(70, 90);
    save_png(&path, &img).unwrap();
    let back = load_png(&path).unwrap();
    assert_eq!(back.shape(), &[3, 70, 90]);
    assert_eq!(back.data(), img.data());
    // every 8-bit level survives
    let levels = Tensor::from_fn(&[3, 16, 16], |i| (i % 256) as f32 / 255.0);
    save_png(&path, &levels).unwrap();
    assert_eq!(load_png(&path).unwrap().data(), levels.data());
}

#[test]
fn luma_matches_reference_values() {
    let img = Tensor::new(
        &[3, 1, 4],
        vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0],
    )
    .unwrap();
    let y = rgb_to_ycbcr_y(&img).unwrap();
    // black, white, red, green
    let expect = [16.0 / 255.0, 235.0 / 255.0, (65.481 + 16.0) / 255.0, (128.553 + 16.0) / 255.0];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} {b}");
    }
    assert!(rgb_to_ycbcr_y(&Tensor::<f32>::zeros(&[1, 4, 4])).is_err());
}

#[test]
fn centre_window_of_wide_image() {
    let p = CropPolicy::default();
    let win = p.window(1024, 2048, 64).unwrap();
    assert_eq!(
        win,
        Window {
            top: 256,
            left: 768,
            height: 512,
            width: 512
        }
    );
    for i in 0..500 {
        let pw = p.patch_window(1024, 2048, 64, i).unwrap();
        assert!(win.contains(&pw), "{pw:?}");
    }
}

#[test]
fn window_shrinks_and_uses_floor_offset() {
    let p = CropPolicy::default();
    assert_eq!(
        p.window(300, 515, 64).unwrap(),
        Window {
            top: 0,
            left: 1,
            height: 300,
            width: 512
        }
    );
    assert!(p.window(63, 100, 64).is_err());
    let random = CropPolicy {
        mode: CropMode::RandomOnly,
        ..p
    };
    assert_eq!(random.window(1024, 2048, 64).unwrap().width, 2048);
}

#[test]
fn small_image_is_rejected() {
    assert!(ImageRecord::new("x.png".into(), ramp(63, 200)).is_err());
}

#[test]
fn patch_offsets_are_uniform() {
    // 16 bins of the top offset over a window with 128 admissible positions
    let p = CropPolicy {
        center_size: 191,
        seed: 11,
        ..CropPolicy::default()
    };
    let win = p.window(191, 191, 64).unwrap();
    let positions = win.height - 64 + 1;
    assert_eq!(positions, 128);
    let draws = 10_000;
    let mut counts = [0usize; 16];
    for i in 0..draws {
        let pw = p.patch_window(191, 191, 64, i).unwrap();
        counts[(pw.top - win.top) * 16 / positions] += 1;
    }
    let expected = draws as f64 / 16.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let pvalue = 1.0 - ChiSquared::new(15.0).unwrap().cdf(chi2);
    assert!(pvalue > 1e-3, "chi2 {chi2} p {pvalue}");
}

#[test]
fn patch_sampling_is_deterministic() {
    let img = record(200, 300);
    let p = CropPolicy {
        seed: 5,
        ..CropPolicy::default()
    };
    let a = sample_patch(&img, &p, 3).unwrap();
    assert_eq!(a.shape(), &[3, 64, 64]);
    assert_eq!(a.data(), sample_patch(&img, &p, 3).unwrap().data());
    assert_ne!(a.data(), sample_patch(&img, &p, 4).unwrap().data());
}

#[test]
fn training_pair_shapes_and_consistency() {
    let img = record(160, 200);
    let policy = CropPolicy {
        patch_size: 16,
        seed: 2,
        ..CropPolicy::default()
    };
    let spec = DegradationSpec::identity(4).unwrap();
    let (lr, hr) = make_training_pair(&img, &policy, &spec, 0).unwrap();
    assert_eq!(lr.shape(), &[3, 16, 16]);
    assert_eq!(hr.shape(), &[3, 64, 64]);
    let down = bicubic_resize_tensor(&hr.clone().reshape(&[1, 3, 64, 64]).unwrap(), 16, 16, true).unwrap();
    assert_eq!(down.data(), lr.data());

    let aug = CropPolicy { augment: true, ..policy };
    let (_, hr_aug) = make_training_pair(&img, &aug, &spec, 0).unwrap();
    let mut a: Vec<u32> = hr.data().iter().map(|v| v.to_bits()).collect();
    let mut b: Vec<u32> = hr_aug.data().iter().map(|v| v.to_bits()).collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b, "augmentation only permutes pixels");
}

#[test]
fn training_pair_falls_back_to_full_image() {
    // window 64 cannot hold the 128 HR crop at x2
    let img = record(128, 300);
    let policy = CropPolicy {
        center_size: 64,
        patch_size: 64,
        seed: 1,
        ..CropPolicy::default()
    };
    let (lr, hr) = make_training_pair(&img, &policy, &DegradationSpec::identity(2).unwrap(), 0).unwrap();
    assert_eq!(lr.shape(), &[3, 64, 64]);
    assert_eq!(hr.shape(), &[3, 128, 128]);
}

#[test]
fn batches_are_reproducible_per_iteration() {
    let records = vec![record(96, 96), record(120, 80)];
    let policy = CropPolicy {
        patch_size: 16,
        seed: 9,
        ..CropPolicy::default()
    };
    let spec = DegradationSpec::config1(2, 4).unwrap();
    let (lr, hr) = make_batch(&records, &policy, &spec, 4, 7).unwrap();
    assert_eq!(lr.shape(), &[4, 3, 16, 16]);
    assert_eq!(hr.shape(), &[4, 3, 32, 32]);
    let (lr2, hr2) = make_batch(&records, &policy, &spec, 4, 7).unwrap();
    assert_eq!(lr.data(), lr2.data());
    assert_eq!(hr.data(), hr2.data());
    let (lr3, _) = make_batch(&records, &policy, &spec, 4, 8).unwrap();
    assert_ne!(lr.data(), lr3.data());
    assert!(make_batch(&[], &policy, &spec, 4, 0).is_err());
}

#[test]
fn prepare_data_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("sub")).unwrap();
    save_png(&dir.path().join("b.png"), &ramp(64, 80)).unwrap();
    save_png(&dir.path().join("sub/a.png"), &ramp(70, 70)).unwrap();
    save_png(&dir.path().join("small.png"), &ramp(32, 80)).unwrap();
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let report = prepare_data(dir.path()).unwrap();
    assert_eq!(report.accepted.len(), 2);
    assert_eq!(report.rejected.len(), 2);
    let manifest = dir.path().join("manifest.json");
    write_manifest(&manifest, &report.accepted).unwrap();
    assert_eq!(read_manifest(&manifest).unwrap(), report.accepted);
}

#[test]
fn policy_rejects_unknown_keys() {
    assert!(serde_json::from_str::<CropPolicy>(r#"{"patch": 3}"#).is_err());
    let p: CropPolicy = serde_json::from_str(r#"{"mode": "random_only"}"#).unwrap();
    assert_eq!(p.mode, CropMode::RandomOnly);
    assert_eq!(p.center_size, 512);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn patches_stay_inside_window(h in 64usize..700, w in 64usize..700, idx in 0u64..1000, seed in 0u64..50) {
        let p = CropPolicy { seed, ..CropPolicy::default() };
        let win = p.window(h, w, 64).unwrap();
        let pw = p.patch_window(h, w, 64, idx).unwrap();
        prop_assert!(win.contains(&pw));
        prop_assert!(win.top + win.height <= h && win.left + win.width <= w);
    }
}
