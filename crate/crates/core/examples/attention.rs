//! Dense against bucketed non-local attention: identical output with a
//! single bucket, a fraction of the score entries with several.
//!
//! `cargo run --release --example attention`

use nlcunet::blocks::{AttentionKind, NonLocalAttention, SparseAttentionConfig};
use nlcunet::rng::{seeded, Gaussian};
use nlcunet::{ParamInit, ParamStore, Tape, Tensor};

fn main() -> nlcunet::Result<()> {
    let channels = 16;
    let mut g = Gaussian::new(seeded(1, 0));
    let x = Tensor::<f64>::from_fn(&[1, channels, 16, 16], |_| g.sample());
    let tokens = 16 * 16;

    let dense = NonLocalAttention::new("att", channels, AttentionKind::Dense, SparseAttentionConfig::default())?;
    let mut params = ParamStore::new();
    dense.init(&mut ParamInit::new(&mut params, 3));
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let (reference, stats) = dense.forward_with_stats(&tape.constant(x.clone()), &bound)?;
    println!("dense: {} score entries", stats.attended_pairs);

    for buckets in [1, 4, 8, 16] {
        let cfg = SparseAttentionConfig {
            bucket_count: buckets,
            ..SparseAttentionConfig::default()
        };
        let sparse = NonLocalAttention::new("att", channels, AttentionKind::Sparse, cfg)?;
        let (y, stats) = sparse.forward_with_stats(&tape.constant(x.clone()), &bound)?;
        let diff = y
            .value()
            .data()
            .iter()
            .zip(reference.value().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "{buckets:>2} buckets: {:>5} entries ({:.1}% of dense), max diff from dense {diff:.2e}",
            stats.attended_pairs,
            100.0 * stats.attended_pairs as f64 / (tokens * tokens) as f64
        );
    }
    Ok(())
}
