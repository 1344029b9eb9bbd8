//! Built-in verification: finite-difference gradient checks, loss oracles
//! and an exhaustive KNN oracle.

use std::time::Instant;

use mvreid::eval::{build_gallery, knn_query, EmbeddingSet, Gallery, GalleryMode};
use mvreid::metric::{
    histogram_loss, histogram_loss_op, pair_similarities, triplet_loss, triplet_loss_mean, triplet_loss_op, LabeledBatch,
    Triplet, TRIPLET_MARGIN,
};
use mvreid::net::{BranchConfig, EmbeddingNet};
use mvreid::seed;
use mvreid::tensor::gradcheck::check;
use mvreid::tensor::{ops, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

/// Finite-difference step of the per-op checks.
pub const OP_STEP: f64 = 1e-3;
/// Step of the whole-network check; see the ledger on LeakyReLU kinks.
pub const NET_STEP: f64 = 1e-4;
/// Step for the losses, whose soft bins are narrow at high bin counts.
pub const LOSS_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Measured quantity: relative error, oracle gap or mismatch count.
    pub value: f64,
    pub limit: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value < self.limit
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        format!("{verdict} {} value={:.3e} limit={:.1e}", self.name, self.value, self.limit)
    }
}

fn randn(shape: &[usize], s: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut seed::rng(s, &[0x6763]))
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, s: u64) -> mvreid::Result<Var> {
    let probe = tape.constant(randn(tape.shape(y), s));
    let p = ops::mul(tape, y, probe)?;
    Ok(ops::sum(tape, p))
}

fn grad_check<F>(name: &str, inputs: &[Tensor<f64>], step: f64, f: F) -> Check
where
    F: Fn(&mut Tape<f64>, &[Var]) -> mvreid::Result<Var>,
{
    let value = check(inputs, step, f).map_or(f64::INFINITY, |r| r.max_rel_error);
    Check { name: format!("gradcheck/{name}"), value, limit: GRAD_TOL }
}

fn tiny_net_check() -> Check {
    let net = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 23).expect("tiny preset is valid").cast::<f64>();
    let mut inputs: Vec<Tensor<f64>> = net.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let n_params = inputs.len();
    inputs.push(randn(&[2, 3, 8, 8], 20));
    inputs.push(randn(&[2, 3, 8, 8], 21));
    let probe = randn(&[2, 128], 22);
    grad_check("tiny-net", &inputs, NET_STEP, |tape, vars| {
        let bound = net.bind_existing(&vars[..n_params])?;
        let e = net.embed(tape, &bound, vars[n_params], Some(vars[n_params + 1]))?;
        let pr = tape.constant(probe.clone());
        let y = ops::mul(tape, e, pr)?;
        Ok(ops::sum(tape, y))
    })
}

/// Gradient checks of every differentiable op, both losses and the tiny
/// two-branch network.
pub fn gradient_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let inputs = [randn(&[2, 3, 6, 6], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)];
        out.push(grad_check(&format!("conv2d-s{stride}p{pad}"), &inputs, OP_STEP, |t, v| {
            let y = ops::conv2d(t, v[0], v[1], v[2], stride, pad)?;
            weighted_sum(t, y, 4)
        }));
    }
    out.push(grad_check("instance-norm", &[randn(&[2, 3, 4, 4], 8), randn(&[3], 9), randn(&[3], 10)], OP_STEP, |t, v| {
        let y = ops::instance_norm2d(t, v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 11)
    }));
    out.push(grad_check("leaky-relu", &[randn(&[2, 3, 3, 3], 12)], OP_STEP, |t, v| {
        let y = ops::leaky_relu(t, v[0], 0.2)?;
        weighted_sum(t, y, 13)
    }));
    out.push(grad_check("add-mul", &[randn(&[2, 3, 2, 2], 14), randn(&[2, 3, 2, 2], 15)], OP_STEP, |t, v| {
        let s = ops::add(t, v[0], v[1])?;
        let m = ops::mul(t, s, v[1])?;
        weighted_sum(t, m, 16)
    }));
    out.push(grad_check("sum", &[randn(&[4, 5], 17)], OP_STEP, |t, v| {
        let sq = ops::mul(t, v[0], v[0])?;
        Ok(ops::sum(t, sq))
    }));
    out.push(grad_check("concat-reshape", &[randn(&[2, 3, 2, 2], 18), randn(&[2, 1, 2, 2], 19)], OP_STEP, |t, v| {
        let y = ops::concat_channels(t, v[0], v[1])?;
        let y = ops::reshape(t, y, &[2, 16])?;
        weighted_sum(t, y, 20)
    }));
    out.push(grad_check("l2-normalize", &[randn(&[3, 7], 21)], OP_STEP, |t, v| {
        let y = ops::l2_normalize(t, v[0], 1e-12)?;
        weighted_sum(t, y, 22)
    }));
    // Dense low-dimensional batches so that at fine binning positive and
    // negative similarities still share bins and the gradient is non-zero.
    let labels: Vec<u32> = (0..24).map(|i| i % 6).collect();
    for bins in [2, 16, 200] {
        out.push(grad_check(&format!("histogram-loss-r{bins}"), &[randn(&[24, 3], 23 + bins as u64)], LOSS_STEP, |t, v| {
            let e = ops::l2_normalize(t, v[0], 1e-12)?;
            histogram_loss_op(t, e, &labels, bins)
        }));
    }
    let mut rng = seed::rng(24, &[]);
    let triplets: Vec<Triplet> =
        (0..12).map(|_| Triplet { anchor: rng.gen_range(0..8), positive: rng.gen_range(0..8), negative: rng.gen_range(0..8) }).collect();
    out.push(grad_check("triplet-loss", &[randn(&[8, 5], 25)], LOSS_STEP, |t, v| {
        let e = ops::l2_normalize(t, v[0], 1e-12)?;
        triplet_loss_op(t, e, &triplets, 1.0)
    }));
    out.push(tiny_net_check());
    out
}

/// Probability that a positive similarity falls below a negative one, ties
/// counted as one half.
pub fn reversal_probability(pos: &[f64], neg: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &p in pos {
        for &n in neg {
            acc += if p < n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (pos.len() * neg.len()) as f64
}

/// A random labelled batch of at most 32 unit rows. Every identity has at
/// least two members; rows are pulled toward their identity's direction by a
/// random amount so the positive and negative distributions overlap to
/// varying degrees.
pub fn random_batch(s: u64) -> (Tensor<f64>, Vec<u32>) {
    let mut rng = seed::rng(s, &[0x6261]);
    let ids = rng.gen_range(2..=8u32);
    let mut labels: Vec<u32> = (0..ids).flat_map(|i| [i, i]).collect();
    let extra = rng.gen_range(0..=(32 - labels.len()));
    labels.extend((0..extra).map(|_| rng.gen_range(0..ids)));
    labels.shuffle(&mut rng);
    let dim = rng.gen_range(8..=128);
    let pull = rng.gen_range(0.0..3.0);
    let centers: Vec<Vec<f64>> = (0..ids).map(|_| (0..dim).map(|_| seed::gaussian(&mut rng)).collect()).collect();
    let mut data = Vec::with_capacity(labels.len() * dim);
    for &l in &labels {
        let row: Vec<f64> = centers[l as usize].iter().map(|c| pull * c + seed::gaussian(&mut rng)).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(row.iter().map(|x| x / n));
    }
    (Tensor::new(&[labels.len(), dim], data).expect("consistent shape"), labels)
}

/// Largest gap between the histogram loss with `bins` bins and the exact
/// reversal probability over `batches` random batches.
pub fn histogram_oracle_gap(batches: usize, bins: usize) -> f64 {
    (0..batches as u64)
        .map(|s| {
            let (e, labels) = random_batch(s);
            let sims = pair_similarities(&LabeledBatch::new(e, labels).expect("valid batch")).expect("pairs exist");
            let loss = histogram_loss(&sims.positive, &sims.negative, bins).expect("valid bins");
            (loss - reversal_probability(&sims.positive, &sims.negative)).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest difference between the batched triplet loss (value and tape op)
/// and a per-triplet evaluation.
pub fn triplet_oracle_gap(batches: usize) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..batches as u64 {
        let (e, _) = random_batch(1000 + s);
        let rows = e.shape()[0];
        let mut rng = seed::rng(s, &[0x7472]);
        let ts: Vec<Triplet> = (0..rng.gen_range(1..64))
            .map(|_| Triplet { anchor: rng.gen_range(0..rows), positive: rng.gen_range(0..rows), negative: rng.gen_range(0..rows) })
            .collect();
        let want = ts.iter().map(|t| triplet_loss(e.row(t.anchor), e.row(t.positive), e.row(t.negative), TRIPLET_MARGIN)).sum::<f64>()
            / ts.len() as f64;
        let mean = triplet_loss_mean(&e, &ts, TRIPLET_MARGIN).expect("valid triplets");
        let mut tape = Tape::new();
        let v = tape.constant(e);
        let op = triplet_loss_op(&mut tape, v, &ts, TRIPLET_MARGIN).expect("valid triplets");
        worst = worst.max((mean - want).abs()).max((tape.value(op).data()[0] - want).abs());
    }
    worst
}

fn unit_set(rows: usize, dim: usize, ids: u32, rng: &mut impl Rng) -> EmbeddingSet {
    let mut t: Tensor<f32> = Tensor::randn(&[rows, dim], rng);
    for r in t.data_mut().chunks_mut(dim) {
        let n = r.iter().map(|x| x * x).sum::<f32>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    // a few exact duplicates so ties are exercised
    for i in 1..rows.min(4) {
        let (head, tail) = t.data_mut().split_at_mut(i * dim);
        tail[..dim].copy_from_slice(&head[..dim]);
    }
    let labels = (0..rows).map(|_| rng.gen_range(0..ids)).collect();
    EmbeddingSet::new(labels, (0..rows as u32).collect(), t).expect("consistent set")
}

/// Every gallery row ordered by descending similarity, then row index, with
/// similarities accumulated left to right in `f32`.
pub fn exhaustive_ranking(gallery: &Gallery, query: &[f32]) -> Vec<(usize, f32)> {
    let e = gallery.entries();
    let mut all: Vec<(usize, f32)> = (0..e.len())
        .map(|i| {
            let mut acc = 0.0f32;
            for (a, b) in query.iter().zip(e.row(i)) {
                acc += a * b;
            }
            (i, acc)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all
}

/// Number of rankings that differ from the exhaustive oracle, over
/// `galleries` random galleries of up to `max_size` rows.
pub fn knn_mismatches(galleries: usize, max_size: usize) -> usize {
    let mut bad = 0;
    for s in 0..galleries as u64 {
        let mut rng = seed::rng(s, &[0x6b6e6e]);
        let size = rng.gen_range(1..=max_size);
        let dim = [8, 32, 128][rng.gen_range(0..3)];
        let set = unit_set(size, dim, 50, &mut rng);
        let gallery = build_gallery(&set, None, GalleryMode::Database).expect("non-empty gallery");
        let queries = unit_set(3, dim, 50, &mut rng);
        for q in 0..queries.len() {
            let k = rng.gen_range(1..=size.min(50));
            let oracle = exhaustive_ranking(&gallery, queries.row(q));
            let got = knn_query(&gallery, queries.row(q), k).expect("valid k");
            let same = got.len() == k
                && got.iter().zip(&oracle).all(|(n, &(row, sim))| n.row == row && n.similarity.to_bits() == sim.to_bits());
            if !same {
                bad += 1;
            }
        }
    }
    bad
}

#[derive(Clone, Debug)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

/// Runs the whole suite. With `inject_conv_fault` the input gradient of
/// every convolution is negated first, which the gradient checks must catch.
pub fn self_check(inject_conv_fault: bool) -> SelfCheckReport {
    let start = Instant::now();
    ops::inject_conv_backward_fault(inject_conv_fault);
    let mut checks = gradient_checks();
    ops::inject_conv_backward_fault(false);
    checks.push(Check { name: "oracle/histogram-r200".into(), value: histogram_oracle_gap(50, 200), limit: 0.03 });
    checks.push(Check { name: "oracle/histogram-r2001".into(), value: histogram_oracle_gap(50, 2001), limit: 0.005 });
    checks.push(Check { name: "oracle/triplet".into(), value: triplet_oracle_gap(20), limit: 1e-12 });
    checks.push(Check { name: "oracle/knn".into(), value: knn_mismatches(100, 5000) as f64, limit: 0.5 });
    SelfCheckReport { checks, seconds: start.elapsed().as_secs_f64() }
}
