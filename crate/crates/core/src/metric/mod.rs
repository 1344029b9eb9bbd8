//! Similarities, losses and hard-example mining over embedding batches.

mod histogram;
mod mining;

pub use histogram::{histogram_loss, histogram_loss_grads, histogram_loss_op, soft_histogram, SimilarityHistogram};
pub use mining::{
    build_training_batch, centroid_of, identity_centroids, mine_hard_triplets, squared_distance, BatchPlan,
    MiningConfig, Triplet,
};

use crate::tensor::{ops, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Histogram node count used for training.
pub const DEFAULT_BINS: usize = 200;
/// Margin of the triplet loss.
pub const TRIPLET_MARGIN: f64 = 0.2;
/// Allowed deviation of a batch row norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-4;
/// Allowed overshoot of a similarity outside `[-1, 1]`.
pub const SIMILARITY_TOL: f64 = 1e-6;

/// Unit-norm embeddings with an identity label per row.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    embeddings: Tensor<T>,
    labels: Vec<u32>,
}

impl<T: Real> LabeledBatch<T> {
    pub fn new(embeddings: Tensor<T>, labels: Vec<u32>) -> Result<Self> {
        let rows = check_rows(&embeddings, &labels)?;
        if rows < 2 {
            return Err(Error::contract(format!("a batch needs at least 2 embeddings, got {rows}")));
        }
        for i in 0..rows {
            let n = embeddings.row(i).iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::contract(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(LabeledBatch { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Returns the row count of a `B×D` matrix whose rows match `labels`.
pub(crate) fn check_rows<T: Real>(embeddings: &Tensor<T>, labels: &[u32]) -> Result<usize> {
    match embeddings.shape() {
        [b, _] if *b == labels.len() => Ok(*b),
        [_, _] => Err(Error::dims("labels", embeddings.shape(), &[labels.len()])),
        s => Err(Error::contract(format!("expected a B×D embedding matrix, got shape {s:?}"))),
    }
}

/// Similarities of all unordered pairs, split by whether the labels agree.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSimilarities {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Unordered index pairs `(i, j)` with `i < j`, split like [`PairSimilarities`].
#[derive(Clone, Debug, Default)]
pub(crate) struct PairIndex {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn new(labels: &[u32]) -> Result<Self> {
        let mut idx = PairIndex::default();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                if labels[i] == labels[j] {
                    idx.positive.push((i, j));
                } else {
                    idx.negative.push((i, j));
                }
            }
        }
        if idx.positive.is_empty() {
            return Err(Error::contract("batch has no positive pair"));
        }
        if idx.negative.is_empty() {
            return Err(Error::contract("batch has no negative pair"));
        }
        Ok(idx)
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

fn similarities<T: Real>(e: &Tensor<T>, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(i, j)| dot(e.row(i), e.row(j))).collect()
}

/// Dot-product similarities of every positive and negative pair.
pub fn pair_similarities<T: Real>(batch: &LabeledBatch<T>) -> Result<PairSimilarities> {
    let idx = PairIndex::new(batch.labels())?;
    Ok(PairSimilarities {
        positive: similarities(batch.embeddings(), &idx.positive),
        negative: similarities(batch.embeddings(), &idx.negative),
    })
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + margin)`.
pub fn triplet_loss<T: Real>(anchor: &[T], positive: &[T], negative: &[T], margin: f64) -> f64 {
    (squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin).max(0.0)
}

fn check_triplets(rows: usize, triplets: &[Triplet]) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::contract("no triplets"));
    }
    for t in triplets {
        let m = t.anchor.max(t.positive).max(t.negative);
        if m >= rows {
            return Err(Error::contract(format!("triplet index {m} out of range for {rows} rows")));
        }
    }
    Ok(())
}

/// Mean triplet loss over rows of `embeddings` referenced by `triplets`.
pub fn triplet_loss_mean<T: Real>(embeddings: &Tensor<T>, triplets: &[Triplet], margin: f64) -> Result<f64> {
    check_triplets(embeddings.shape().first().copied().unwrap_or(0), triplets)?;
    let e = embeddings;
    let total: f64 = triplets
        .iter()
        .map(|t| triplet_loss(e.row(t.anchor), e.row(t.positive), e.row(t.negative), margin))
        .sum();
    Ok(total / triplets.len() as f64)
}

/// Differentiable mean triplet loss over rows of the `B×D` variable.
pub fn triplet_loss_op<T: Real>(tape: &mut Tape<T>, embeddings: Var, triplets: &[Triplet], margin: f64) -> Result<Var> {
    let e = tape.value(embeddings);
    let [rows, d] = match e.shape() {
        &[b, d] => [b, d],
        s => return Err(Error::contract(format!("expected a B×D embedding matrix, got shape {s:?}"))),
    };
    check_triplets(rows, triplets)?;
    let scale = 1.0 / triplets.len() as f64;
    let mut grad = vec![0.0f64; rows * d];
    let mut total = 0.0;
    for t in triplets {
        let (a, p, n) = (e.row(t.anchor), e.row(t.positive), e.row(t.negative));
        let l = squared_distance(a, p) - squared_distance(a, n) + margin;
        if l <= 0.0 {
            continue;
        }
        total += l;
        for k in 0..d {
            let (a, p, n) = (a[k].f64(), p[k].f64(), n[k].f64());
            grad[t.anchor * d + k] += 2.0 * scale * (n - p);
            grad[t.positive * d + k] += 2.0 * scale * (p - a);
            grad[t.negative * d + k] += 2.0 * scale * (a - n);
        }
    }
    let local = grad.into_iter().map(T::of).collect();
    Ok(ops::fused_scalar(tape, T::of(total * scale), vec![(embeddings, local)]))
}
