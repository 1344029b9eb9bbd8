use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use super::check_rows;
use crate::tensor::{Real, Tensor};
use crate::{seed, Error, Result};

/// Rows of one triplet. Indices refer to whatever matrix the triplet was
/// mined from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiningConfig {
    /// Hard candidates per choice; the pick is uniform among them.
    pub candidates: usize,
    /// Samples embedded per batch build.
    pub pool: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { candidates: 5, pool: 512 }
    }
}

pub fn squared_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum()
}

/// Mean embedding of the rows labelled `id`.
pub fn centroid_of<T: Real>(embeddings: &Tensor<T>, labels: &[u32], id: u32) -> Result<Vec<f64>> {
    check_rows(embeddings, labels)?;
    let d = embeddings.shape()[1];
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == id) {
        for (s, x) in sum.iter_mut().zip(embeddings.row(i)) {
            *s += x.f64();
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract(format!("identity {id} has no embeddings")));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Mean embedding of every identity present in `labels`.
pub fn identity_centroids<T: Real>(embeddings: &Tensor<T>, labels: &[u32]) -> Result<BTreeMap<u32, Vec<f64>>> {
    check_rows(embeddings, labels)?;
    let ids: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
    ids.into_iter().map(|id| Ok((id, centroid_of(embeddings, labels, id)?))).collect()
}

fn dist_to(row: &[f32], c: &[f64]) -> f64 {
    row.iter().zip(c).map(|(x, y)| (*x as f64 - y).powi(2)).sum()
}

/// Rows sorted by a key, ties broken by row index.
fn ranked(rows: impl Iterator<Item = usize>, key: impl Fn(usize) -> f64, descending: bool) -> Vec<usize> {
    let mut v: Vec<(f64, usize)> = rows.map(|i| (key(i), i)).collect();
    v.sort_by(|a, b| {
        let o = a.0.total_cmp(&b.0);
        (if descending { o.reverse() } else { o }).then(a.1.cmp(&b.1))
    });
    v.into_iter().map(|(_, i)| i).collect()
}

/// Mines `count` triplets. For each, an identity with at least two samples
/// is drawn uniformly; the positive is drawn from the `candidates` samples
/// of that identity farthest from its centroid, the anchor uniformly from the
/// remaining ones, and the negative from the `candidates` samples of other
/// identities closest to the centroid.
pub fn mine_hard_triplets(
    embeddings: &Tensor<f32>,
    labels: &[u32],
    count: usize,
    candidates: usize,
    seed_value: u64,
) -> Result<Vec<Triplet>> {
    check_rows(embeddings, labels)?;
    if candidates == 0 {
        return Err(Error::contract("need at least one mining candidate"));
    }
    let centroids = identity_centroids(embeddings, labels)?;
    if centroids.len() < 2 {
        return Err(Error::contract("mining needs at least two identities"));
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let eligible: Vec<u32> = members.iter().filter(|(_, m)| m.len() >= 2).map(|(&id, _)| id).collect();
    if eligible.is_empty() {
        return Err(Error::contract("no identity has two samples to form a positive pair"));
    }
    let mut hard_pos = BTreeMap::new();
    let mut hard_neg = BTreeMap::new();
    for &id in &eligible {
        let c = &centroids[&id];
        let pos = ranked(members[&id].iter().copied(), |i| dist_to(embeddings.row(i), c), true);
        let others = (0..labels.len()).filter(|&i| labels[i] != id);
        let neg = ranked(others, |i| dist_to(embeddings.row(i), c), false);
        hard_pos.insert(id, pos);
        hard_neg.insert(id, neg);
    }
    let mut rng = seed::rng(seed_value, &[0x6d696e65]);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = eligible[rng.gen_range(0..eligible.len())];
        let pos = &hard_pos[&id];
        let positive = pos[rng.gen_range(0..candidates.min(pos.len()))];
        let rest: Vec<usize> = members[&id].iter().copied().filter(|&i| i != positive).collect();
        let anchor = rest[rng.gen_range(0..rest.len())];
        let neg = &hard_neg[&id];
        let negative = neg[rng.gen_range(0..candidates.min(neg.len()))];
        out.push(Triplet { anchor, positive, negative });
    }
    Ok(out)
}

/// Samples for one training step, with triplets indexing into `samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    /// Sorted, distinct dataset indices.
    pub samples: Vec<usize>,
    pub labels: Vec<u32>,
    pub triplets: Vec<Triplet>,
}

/// Draws a random pool of dataset samples, embeds it with `embed` (called
/// once with the sorted pool indices, returning one row per index), mines
/// `batch_triplets` hard triplets and returns the union of their members.
pub fn build_training_batch<F>(
    labels: &[u32],
    config: &MiningConfig,
    batch_triplets: usize,
    seed_value: u64,
    embed: F,
) -> Result<BatchPlan>
where
    F: FnOnce(&[usize]) -> Result<Tensor<f32>>,
{
    let distinct: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::contract("training data spans fewer than two identities"));
    }
    if batch_triplets == 0 {
        return Err(Error::contract("batch needs at least one triplet"));
    }
    let mut rng = seed::rng(seed_value, &[0x706f6f6c]);
    let mut pool = index::sample(&mut rng, labels.len(), config.pool.min(labels.len())).into_vec();
    pool.sort_unstable();
    let emb = embed(&pool)?;
    let pool_labels: Vec<u32> = pool.iter().map(|&i| labels[i]).collect();
    if emb.shape().first() != Some(&pool.len()) {
        return Err(Error::dims("pool embedding", emb.shape(), &[pool.len()]));
    }
    let mined = mine_hard_triplets(&emb, &pool_labels, batch_triplets, config.candidates, seed_value)?;
    let mut samples: Vec<usize> = mined.iter().flat_map(|t| [pool[t.anchor], pool[t.positive], pool[t.negative]]).collect();
    samples.sort_unstable();
    samples.dedup();
    let at = |dataset_index: usize| samples.binary_search(&dataset_index).expect("member of the batch");
    let triplets = mined
        .iter()
        .map(|t| Triplet { anchor: at(pool[t.anchor]), positive: at(pool[t.positive]), negative: at(pool[t.negative]) })
        .collect();
    let labels = samples.iter().map(|&i| labels[i]).collect();
    Ok(BatchPlan { samples, labels, triplets })
}
