//! Exact top-k search over packed codes by linear scan.
//!
//! Distances take only `d + 1` values, so ranking is a counting sort on the
//! distance with items visited in id order, which gives the ascending-id
//! tie-break for free.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codes::{BinaryCodeMatrix, CodeRow};
use crate::data::InteractionSet;
use crate::error::{Error, Result};

/// Item codes plus optional per-user exclusion lists.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    items: BinaryCodeMatrix,
    excluded: Vec<Vec<usize>>,
}

impl RetrievalIndex {
    pub fn new(items: BinaryCodeMatrix) -> Self {
        Self {
            items,
            excluded: Vec::new(),
        }
    }

    /// `excluded[u]` lists the items never returned for user `u`.
    pub fn with_exclusions(items: BinaryCodeMatrix, mut excluded: Vec<Vec<usize>>) -> Result<Self> {
        for list in &mut excluded {
            list.sort_unstable();
            list.dedup();
            if let Some(&bad) = list.iter().find(|&&i| i >= items.rows()) {
                return Err(Error::IndexOutOfRange {
                    index: bad,
                    len: items.rows(),
                });
            }
        }
        Ok(Self { items, excluded })
    }

    /// Excludes each user's train positives.
    pub fn from_train(items: BinaryCodeMatrix, data: &InteractionSet) -> Result<Self> {
        if items.rows() != data.n_items() {
            return Err(Error::DimensionMismatch {
                left: items.rows(),
                right: data.n_items(),
            });
        }
        let excluded = (0..data.n_users())
            .map(|u| data.train(u).to_vec())
            .collect();
        Self::with_exclusions(items, excluded)
    }

    pub fn items(&self) -> &BinaryCodeMatrix {
        &self.items
    }

    fn exclusions(&self, user: Option<usize>) -> Result<&[usize]> {
        match user {
            None => Ok(&[]),
            Some(u) => self
                .excluded
                .get(u)
                .map(Vec::as_slice)
                .ok_or(Error::IndexOutOfRange {
                    index: u,
                    len: self.excluded.len(),
                }),
        }
    }

    /// The `k` nearest items to `query` by Hamming distance, as
    /// `(item, distance)` sorted by distance then id. Fewer are returned
    /// when fewer candidates exist.
    pub fn top_k(
        &self,
        query: CodeRow<'_>,
        k: usize,
        exclude_user: Option<usize>,
    ) -> Result<Vec<(usize, u32)>> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if query.dim() != self.items.dim() {
            return Err(Error::DimensionMismatch {
                left: query.dim(),
                right: self.items.dim(),
            });
        }
        let excluded = self.exclusions(exclude_user)?;
        Ok(hamming_rank(&self.items, query, k, excluded))
    }

    /// Every candidate, ranked.
    pub fn rank_all(
        &self,
        query: CodeRow<'_>,
        exclude_user: Option<usize>,
    ) -> Result<Vec<(usize, u32)>> {
        self.top_k(query, self.items.rows().max(1), exclude_user)
    }
}

/// Counting-sort ranking. `excluded` must be sorted.
pub(crate) fn hamming_rank(
    items: &BinaryCodeMatrix,
    query: CodeRow<'_>,
    k: usize,
    excluded: &[usize],
) -> Vec<(usize, u32)> {
    let d = items.dim();
    let m = items.rows();
    let mut dist = vec![u32::MAX; m];
    let mut counts = vec![0usize; d + 2];
    let mut skip = excluded.iter().peekable();
    for (i, slot) in dist.iter_mut().enumerate() {
        if skip.peek() == Some(&&i) {
            skip.next();
            continue;
        }
        let h = query.hamming_unchecked(&items.row(i));
        *slot = h;
        counts[h as usize + 1] += 1;
    }
    for h in 1..counts.len() {
        counts[h] += counts[h - 1];
    }
    let total = counts[d + 1];
    let k = k.min(total);
    // Smallest distance whose bucket reaches k.
    let cutoff = (0..=d).find(|&h| counts[h + 1] >= k).unwrap_or(d);
    let mut out = vec![(0usize, 0u32); counts[cutoff + 1]];
    for (i, &h) in dist.iter().enumerate() {
        if (h as usize) <= cutoff {
            let slot = &mut counts[h as usize];
            out[*slot] = (i, h);
            *slot += 1;
        }
    }
    out.truncate(k);
    out
}

/// Reference ranking: every candidate's distance, sorted by (distance, id).
pub fn naive_top_k(
    items: &BinaryCodeMatrix,
    query: CodeRow<'_>,
    k: usize,
    excluded: &[usize],
) -> Vec<(usize, u32)> {
    let mut all: Vec<(usize, u32)> = (0..items.rows())
        .filter(|i| !excluded.contains(i))
        .map(|i| {
            let h = (0..query.dim())
                .filter(|&b| query.sign(b) != items.get(i, b))
                .count();
            (i, h as u32)
        })
        .collect();
    all.sort_by_key(|&(i, h)| (h, i));
    all.truncate(k);
    all
}

/// Ranks items by descending real score, ties by ascending id, skipping the
/// sorted `excluded` list.
pub fn rank_by_score(scores: &[f64], k: usize, excluded: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len())
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    let key = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < ids.len() {
        ids.select_nth_unstable_by(k, key);
        ids.truncate(k);
    }
    ids.sort_unstable_by(key);
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub m: usize,
    pub d: usize,
    pub hamming_qps: f64,
    pub float_qps: f64,
    pub speedup: f64,
}

fn float_rank(items: &[f32], d: usize, query: &[f32], scores: &mut [f32], order: &mut Vec<u32>) {
    for (s, row) in scores.iter_mut().zip(items.chunks_exact(d)) {
        *s = row.iter().zip(query).map(|(a, b)| a * b).sum();
    }
    order.clear();
    order.extend(0..scores.len() as u32);
    order.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
}

/// Full-ranking throughput of packed Hamming scoring against `f32`
/// dot-product scoring with a comparison sort, on random data of the same
/// shape. Runs on the calling thread.
pub fn benchmark_speedup(m: usize, d: usize, n_queries: usize, seed: u64) -> Result<BenchResult> {
    if m == 0 || d == 0 || n_queries == 0 {
        return Err(Error::InvalidParameter(
            "m, d and n_queries must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = BinaryCodeMatrix::random(m, d, &mut rng);
    let queries = BinaryCodeMatrix::random(n_queries, d, &mut rng);
    let float_items: Vec<f32> = (0..m * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let float_queries: Vec<f32> = (0..n_queries * d)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();

    let t = Instant::now();
    for q in 0..n_queries {
        black_box(hamming_rank(&items, queries.row(q), m, &[]));
    }
    let hamming_secs = t.elapsed().as_secs_f64();

    let mut scores = vec![0.0f32; m];
    let mut order = Vec::with_capacity(m);
    let t = Instant::now();
    for q in float_queries.chunks_exact(d) {
        float_rank(&float_items, d, q, &mut scores, &mut order);
        black_box(&order);
    }
    let float_secs = t.elapsed().as_secs_f64();

    let hamming_qps = n_queries as f64 / hamming_secs.max(1e-12);
    let float_qps = n_queries as f64 / float_secs.max(1e-12);
    Ok(BenchResult {
        m,
        d,
        hamming_qps,
        float_qps,
        speedup: hamming_qps / float_qps,
    })
}
