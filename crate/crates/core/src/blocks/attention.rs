//! Non-local attention over the spatial positions of a feature map, in a dense
//! form and a bucketed (spherical LSH) sparse form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamInit};
use crate::rng::{seeded, Gaussian};
use crate::tensor::{grouped_attention, AttentionGroup, AttentionStats, Padding, Scalar, Var};

/// Largest token count the dense variant accepts.
pub const DENSE_MAX_TOKENS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseAttentionConfig {
    pub num_hash_rounds: usize,
    pub bucket_count: usize,
    pub rng_seed: u64,
}

impl Default for SparseAttentionConfig {
    fn default() -> Self {
        Self {
            num_hash_rounds: 1,
            bucket_count: 8,
            rng_seed: 0,
        }
    }
}

impl SparseAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bucket_count == 0 {
            return Err(Error::Config("bucket_count must be >= 1".into()));
        }
        if self.num_hash_rounds == 0 {
            return Err(Error::Config("num_hash_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Dense,
    Sparse,
}

/// Single-head non-local attention with a residual connection:
/// `y = x + Wout * softmax(Q K^T / sqrt(C)) V`.
#[derive(Clone, Debug)]
pub struct NonLocalAttention {
    prefix: String,
    channels: usize,
    kind: AttentionKind,
    sparse: SparseAttentionConfig,
    /// `[round][bucket][channel]` unit vectors used to hash queries.
    projections: Vec<Vec<Vec<f64>>>,
}

impl NonLocalAttention {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        kind: AttentionKind,
        sparse: SparseAttentionConfig,
    ) -> Result<Self> {
        sparse.validate()?;
        let prefix = prefix.into();
        // each block hashes with its own directions, derived from the shared seed
        let stream = prefix.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        let mut g = Gaussian::new(seeded(sparse.rng_seed, stream));
        let projections = (0..sparse.num_hash_rounds)
            .map(|_| {
                (0..sparse.bucket_count)
                    .map(|_| {
                        let v: Vec<f64> = (0..channels).map(|_| g.sample()).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        v.into_iter().map(|x| x / norm).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            prefix,
            channels,
            kind,
            sparse,
            projections,
        })
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn init<T: Scalar>(&self, init: &mut ParamInit<'_, T>) {
        let c = self.channels;
        for name in ["q", "k", "v", "out"] {
            init.conv(&format!("{}.{name}", self.prefix), c, c, 1, 1, false);
        }
    }

    pub fn forward<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<Var<T>> {
        self.forward_with_stats(x, p).map(|(y, _)| y)
    }

    pub fn forward_with_stats<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<(Var<T>, AttentionStats)> {
        match self.kind {
            AttentionKind::Dense => self.forward_dense(x, p),
            AttentionKind::Sparse => self.forward_sparse(x, p),
        }
    }

    fn tokens<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>, name: &str) -> Result<Var<T>> {
        let [n, c, h, w] = x.value().dims4()?;
        p.conv(x, &format!("{}.{name}", self.prefix), 1, Padding::NONE)?
            .reshape(&[n, c, h * w])?
            .transpose_last2()
    }

    fn finish<T: Scalar>(&self, x: &Var<T>, attended: &Var<T>, p: &Bound<T>) -> Result<Var<T>> {
        let [n, c, h, w] = x.value().dims4()?;
        let map = attended.transpose_last2()?.reshape(&[n, c, h, w])?;
        let out = p.conv(&map, &format!("{}.out", self.prefix), 1, Padding::NONE)?;
        x.add(&out)
    }

    fn check_channels<T: Scalar>(&self, x: &Var<T>) -> Result<[usize; 4]> {
        let dims = x.value().dims4()?;
        if dims[1] != self.channels {
            return Err(Error::shape(
                "nonlocal_attention",
                "channels",
                format!("block built for {} channels, got {}", self.channels, dims[1]),
            ));
        }
        Ok(dims)
    }

    fn scale<T: Scalar>(&self) -> T {
        T::lit(1.0 / (self.channels as f64).sqrt())
    }

    fn forward_dense<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<(Var<T>, AttentionStats)> {
        let [n, _, h, w] = self.check_channels(x)?;
        let t = h * w;
        if t > DENSE_MAX_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "dense attention over {t} tokens exceeds {DENSE_MAX_TOKENS}; use the sparse variant"
            )));
        }
        let q = self.tokens(x, p, "q")?;
        let k = self.tokens(x, p, "k")?;
        let v = self.tokens(x, p, "v")?;
        let attn = q.matmul_batched_nt(&k)?.scale(self.scale()).softmax_lastdim();
        let attended = attn.matmul_batched(&v)?;
        let stats = AttentionStats {
            attended_pairs: n * t * t,
        };
        Ok((self.finish(x, &attended, p)?, stats))
    }

    fn forward_sparse<T: Scalar>(&self, x: &Var<T>, p: &Bound<T>) -> Result<(Var<T>, AttentionStats)> {
        let [n, c, h, w] = self.check_channels(x)?;
        let t = h * w;
        let q = self.tokens(x, p, "q")?;
        let k = self.tokens(x, p, "k")?;
        let v = self.tokens(x, p, "v")?;
        let groups = (0..n)
            .map(|b| self.groups(&q.value().data()[b * t * c..(b + 1) * t * c], t, c))
            .collect();
        let (attended, stats) = grouped_attention(&q, &k, &v, groups, self.scale())?;
        Ok((self.finish(x, &attended, p)?, stats))
    }

    /// Bucket id of every token for every hash round.
    pub fn bucket_assignments<T: Scalar>(&self, queries: &[T], tokens: usize) -> Vec<Vec<usize>> {
        let c = self.channels;
        self.projections
            .iter()
            .map(|round| {
                (0..tokens)
                    .map(|i| {
                        let q = &queries[i * c..(i + 1) * c];
                        let norm = q.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                        let norm = if norm > 0.0 { norm } else { 1.0 };
                        let mut best = 0;
                        let mut best_score = f64::NEG_INFINITY;
                        for (b, dir) in round.iter().enumerate() {
                            let s: f64 = q.iter().zip(dir).map(|(v, d)| v.as_f64() / norm * d).sum();
                            if s > best_score {
                                best = b;
                                best_score = s;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect()
    }

    /// Every query attends to the union (with multiplicity) of the buckets it
    /// falls into across hash rounds. Queries sharing all their buckets share
    /// one group.
    fn groups<T: Scalar>(&self, queries: &[T], tokens: usize, channels: usize) -> Vec<AttentionGroup> {
        debug_assert_eq!(queries.len(), tokens * channels);
        let assign = self.bucket_assignments(queries, tokens);
        let members: Vec<Vec<Vec<u32>>> = assign
            .iter()
            .map(|round| {
                let mut m = vec![Vec::new(); self.sparse.bucket_count];
                for (i, &b) in round.iter().enumerate() {
                    m[b].push(i as u32);
                }
                m
            })
            .collect();
        let mut by_signature: BTreeMap<Vec<usize>, Vec<u32>> = BTreeMap::new();
        for i in 0..tokens {
            let sig: Vec<usize> = assign.iter().map(|round| round[i]).collect();
            by_signature.entry(sig).or_default().push(i as u32);
        }
        by_signature
            .into_iter()
            .map(|(sig, queries)| {
                let keys = sig
                    .iter()
                    .zip(&members)
                    .flat_map(|(&b, m)| m[b].iter().copied())
                    .collect();
                AttentionGroup { queries, keys }
            })
            .collect()
    }
}
