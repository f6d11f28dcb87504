//! Finite-difference checks for every differentiable op and block, at 64-bit
//! precision and small random shapes.

use nlcunet::blocks::{AttentionKind, ChannelAttention, Gdfn, NlcBlock, NlcOptions, NonLocalAttention, SparseAttentionConfig};
use nlcunet::tensor::{concat_channels, Padding};
use nlcunet::model::{spectral_normalize, Discriminator, DiscriminatorConfig, Generator, ModelConfig, PowerState};
use nlcunet::{ParamInit, ParamStore};

use super::{gradcheck, gradcheck_params, project, random};

pub struct Check {
    pub name: &'static str,
    pub worst: f64,
}

fn op(name: &'static str, worst: f64) -> Check {
    Check { name, worst }
}

pub fn op_checks(seed: u64) -> Vec<Check> {
    let s = seed * 1000;
    let r = |shape: &[usize], k: u64| random(shape, s + k);
    let mut out = Vec::new();

    out.push(op("conv2d_zero_pad", gradcheck(&[r(&[2, 3, 5, 5], 1), r(&[4, 3, 3, 3], 2), r(&[4], 3)], |v| {
        project(&v[0].conv2d(&v[1], Some(&v[2]), 1, Padding::zero(1))?, s)
    })));
    out.push(op("conv2d_reflect_stride2", gradcheck(&[r(&[1, 2, 6, 6], 4), r(&[3, 2, 3, 3], 5)], |v| {
        project(&v[0].conv2d(&v[1], None, 2, Padding::reflect(1))?, s)
    })));
    out.push(op("conv2d_1x1", gradcheck(&[r(&[2, 4, 3, 4], 6), r(&[5, 4, 1, 1], 7), r(&[5], 8)], |v| {
        project(&v[0].conv2d(&v[1], Some(&v[2]), 1, Padding::NONE)?, s)
    })));
    out.push(op("depthwise_conv2d", gradcheck(&[r(&[2, 3, 5, 4], 9), r(&[3, 1, 3, 3], 10)], |v| {
        project(&v[0].depthwise_conv2d(&v[1], Padding::reflect(1))?, s)
    })));
    out.push(op("depthwise_conv2d_zero", gradcheck(&[r(&[1, 2, 4, 4], 11), r(&[2, 1, 3, 3], 12)], |v| {
        project(&v[0].depthwise_conv2d(&v[1], Padding::zero(1))?, s)
    })));
    out.push(op("layernorm_channels", gradcheck(&[r(&[2, 5, 3, 3], 13), r(&[5], 14), r(&[5], 15)], |v| {
        project(&v[0].layernorm_channels(&v[1], &v[2], 1e-6)?, s)
    })));
    out.push(op("softmax_lastdim", gradcheck(&[r(&[2, 3, 5], 16)], |v| project(&v[0].softmax_lastdim(), s))));
    out.push(op("global_avg_pool", gradcheck(&[r(&[2, 3, 4, 5], 17)], |v| {
        project(&v[0].global_avg_pool()?, s)
    })));
    out.push(op("pixel_shuffle", gradcheck(&[r(&[1, 8, 3, 2], 18)], |v| project(&v[0].pixel_shuffle(2)?, s))));
    out.push(op("pixel_unshuffle", gradcheck(&[r(&[1, 2, 4, 6], 19)], |v| {
        project(&v[0].pixel_unshuffle(2)?, s)
    })));
    out.push(op("bicubic_resize_up", gradcheck(&[r(&[1, 2, 3, 4], 20)], |v| {
        project(&v[0].bicubic_resize(6, 6, true)?, s)
    })));
    out.push(op("bicubic_resize_down_aa", gradcheck(&[r(&[1, 2, 6, 6], 21)], |v| {
        project(&v[0].bicubic_resize(3, 2, true)?, s)
    })));
    out.push(op("matmul_batched", gradcheck(&[r(&[2, 3, 4], 22), r(&[2, 4, 5], 23)], |v| {
        project(&v[0].matmul_batched(&v[1])?, s)
    })));
    out.push(op("matmul_batched_nt", gradcheck(&[r(&[2, 3, 4], 24), r(&[2, 5, 4], 25)], |v| {
        project(&v[0].matmul_batched_nt(&v[1])?, s)
    })));
    out.push(op("add", gradcheck(&[r(&[2, 3], 26), r(&[2, 3], 27)], |v| project(&v[0].add(&v[1])?, s))));
    out.push(op("sub", gradcheck(&[r(&[2, 3], 28), r(&[2, 3], 29)], |v| project(&v[0].sub(&v[1])?, s))));
    out.push(op("mul", gradcheck(&[r(&[2, 3], 30), r(&[2, 3], 31)], |v| project(&v[0].mul(&v[1])?, s))));
    out.push(op("mul_channel", gradcheck(&[r(&[2, 3, 2, 3], 32), r(&[2, 3, 1, 1], 33)], |v| {
        project(&v[0].mul_channel(&v[1])?, s)
    })));
    out.push(op("scale_shift", gradcheck(&[r(&[4], 34)], |v| project(&v[0].scale(-1.7).add_scalar(0.3), s))));
    out.push(op("concat_channels", gradcheck(&[r(&[2, 2, 3, 3], 35), r(&[2, 3, 3, 3], 36)], |v| {
        project(&concat_channels(&[&v[0], &v[1]])?, s)
    })));
    out.push(op("chunk_channels", gradcheck(&[r(&[2, 4, 2, 3], 37)], |v| {
        let parts = v[0].chunk_channels(2)?;
        project(&parts[1].mul(&parts[0])?, s)
    })));
    out.push(op("relu", gradcheck(&[r(&[3, 5], 38)], |v| project(&v[0].relu(), s))));
    out.push(op("leaky_relu", gradcheck(&[r(&[3, 5], 39)], |v| project(&v[0].leaky_relu(0.2), s))));
    out.push(op("gelu", gradcheck(&[r(&[3, 5], 40)], |v| project(&v[0].gelu(), s))));
    out.push(op("sigmoid", gradcheck(&[r(&[3, 5], 41)], |v| project(&v[0].sigmoid(), s))));
    out.push(op("softplus", gradcheck(&[r(&[3, 5], 42).map(|x| x * 4.0)], |v| project(&v[0].softplus(), s))));
    out.push(op("mean", gradcheck(&[r(&[3, 5], 43)], |v| Ok(v[0].mean().scale(3.0)))));
    out.push(op("sum", gradcheck(&[r(&[3, 5], 44)], |v| Ok(v[0].sum()))));
    out.push(op("l1_distance", gradcheck(&[r(&[2, 6], 45), r(&[2, 6], 46)], |v| v[0].l1_distance(&v[1]))));
    out.push(op("reshape_transpose", gradcheck(&[r(&[2, 3, 4], 47)], |v| {
        project(&v[0].transpose_last2()?.reshape(&[2, 2, 6])?, s)
    })));
    out.push(op("pad_reflect", gradcheck(&[r(&[1, 2, 4, 5], 48)], |v| {
        project(&v[0].pad_reflect(1, 2, 3, 0)?, s)
    })));
    out.push(op("crop", gradcheck(&[r(&[1, 2, 5, 5], 49)], |v| project(&v[0].crop(1, 2, 3, 2)?, s))));
    out
}

fn block_store(seed: u64, f: impl FnOnce(&mut ParamInit<'_, f64>)) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut init = ParamInit::new(&mut store, seed);
    f(&mut init);
    // layer-norm affines start at 1/0; perturb so their gradients are generic
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        if n.ends_with(".gamma") || n.ends_with(".beta") {
            let t = store.get(n).unwrap().clone();
            let noise = random(t.shape(), seed * 31 + i as u64);
            store.insert(n.clone(), t.zip_map(&noise, |a, b| a + 0.3 * b));
        }
    }
    store
}

pub fn block_checks(seed: u64) -> Vec<Check> {
    let s = seed * 1000 + 500;
    let mut out = Vec::new();

    let ca = ChannelAttention::new("ca", 8, 4);
    let store = block_store(s, |i| ca.init(i));
    out.push(op("channel_attention", gradcheck_params(&store, &random(&[2, 8, 3, 3], s + 1), |x, p| {
        project(&ca.forward(x, p)?, s)
    })));

    let gdfn = Gdfn::new("gdfn", 4, 2.0, true);
    let store = block_store(s + 2, |i| gdfn.init(i));
    out.push(op("gdfn", gradcheck_params(&store, &random(&[1, 4, 4, 3], s + 3), |x, p| {
        project(&gdfn.forward(x, p)?, s)
    })));

    let dense = NonLocalAttention::new("nla", 4, AttentionKind::Dense, SparseAttentionConfig::default()).unwrap();
    let store = block_store(s + 4, |i| dense.init(i));
    out.push(op("nonlocal_attention_dense", gradcheck_params(&store, &random(&[2, 4, 3, 3], s + 5), |x, p| {
        project(&dense.forward(x, p)?, s)
    })));

    let cfg = SparseAttentionConfig {
        num_hash_rounds: 2,
        bucket_count: 3,
        rng_seed: seed,
    };
    let sparse = NonLocalAttention::new("nlsa", 4, AttentionKind::Sparse, cfg).unwrap();
    let store = block_store(s + 6, |i| sparse.init(i));
    out.push(op("nonlocal_attention_sparse", gradcheck_params(&store, &random(&[2, 4, 4, 4], s + 7), |x, p| {
        project(&sparse.forward(x, p)?, s)
    })));

    let opts = NlcOptions {
        attention: AttentionKind::Sparse,
        sparse: SparseAttentionConfig {
            num_hash_rounds: 1,
            bucket_count: 4,
            rng_seed: seed,
        },
        ca_reduction: 4,
        ..NlcOptions::default()
    };
    let nlc = NlcBlock::new("nlc", 8, opts).unwrap();
    let store = block_store(s + 8, |i| nlc.init(i));
    out.push(op("nlc_block", gradcheck_params(&store, &random(&[1, 8, 6, 6], s + 9), |x, p| {
        project(&nlc.forward(x, p)?, s)
    })));

    out
}

/// Perturbs every parameter so zero-initialized tensors (the RGB tail) still
/// carry generic gradients.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        let t = store.get(n).unwrap().clone();
        let noise = random(t.shape(), seed * 97 + i as u64);
        store.insert(n.clone(), t.zip_map(&noise, |a, b| a + 0.1 * b));
    }
}

pub fn model_checks(seed: u64) -> Vec<Check> {
    let s = seed * 1000 + 800;
    let mut out = Vec::new();

    out.push(op("spectral_normalize", {
        let state = PowerState::new(3, 8, s);
        gradcheck(&[random(&[3, 2, 2, 2], s)], |v| {
            project(&spectral_normalize(&v[0], &mut state.clone(), 0)?, s)
        })
    }));

    let cfg = ModelConfig {
        base_channels: 4,
        unet_levels: 2,
        blocks_per_level: 1,
        scale: 2,
        ca_reduction: 2,
        sparse: nlcunet::blocks::SparseAttentionConfig {
            num_hash_rounds: 1,
            bucket_count: 2,
            rng_seed: seed,
        },
        ..ModelConfig::default()
    };
    let g = Generator::new(cfg).unwrap();
    let mut store = g.init::<f64>(s + 1);
    jitter(&mut store, s + 2);
    out.push(op("generator", gradcheck_params(&store, &random(&[1, 3, 4, 3], s + 3), |x, p| {
        project(&g.forward(x, p)?, s)
    })));

    // frozen power vectors: the function the backward rule differentiates
    let d = Discriminator::new(DiscriminatorConfig {
        base_channels: 2,
        ..DiscriminatorConfig::default()
    })
    .unwrap();
    let store = d.init::<f64>(s + 4);
    let mut power = d.init_power(s + 5);
    {
        let tape = nlcunet::Tape::new();
        let x = tape.constant(random(&[1, 3, 8, 8], s + 7));
        for _ in 0..5 {
            d.forward(&x, &store.bind_frozen(&tape), &mut power).unwrap();
        }
    }
    out.push(op("discriminator", gradcheck_params(&store, &random(&[1, 3, 8, 8], s + 6), |x, p| {
        project(&d.forward_frozen(x, p, &power)?, s)
    })));
    out
}

pub fn all_checks(seed: u64) -> Vec<Check> {
    let mut v = op_checks(seed);
    v.extend(block_checks(seed));
    v.extend(model_checks(seed));
    v
}
