use std::collections::BTreeMap;

use mvreid::metric::{
    build_training_batch, centroid_of, histogram_loss, histogram_loss_op, identity_centroids, mine_hard_triplets,
    pair_similarities, soft_histogram, triplet_loss, triplet_loss_mean, triplet_loss_op, LabeledBatch,
    MiningConfig, Triplet, DEFAULT_BINS, TRIPLET_MARGIN,
};
use mvreid::seed;
use mvreid::tensor::gradcheck::check;
use mvreid::tensor::{ops, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn unit_rows(rows: usize, dim: usize, s: u64) -> Tensor<f64> {
    let mut t: Tensor<f64> = Tensor::randn(&[rows, dim], &mut seed::rng(s, &[]));
    for r in t.data_mut().chunks_mut(dim) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Rows clustered around per-identity centres; `spread` scales the noise.
fn clustered(labels: &[u32], dim: usize, spread: f64, s: u64) -> Tensor<f64> {
    let mut rng = seed::rng(s, &[]);
    let ids = labels.iter().max().unwrap() + 1;
    let centres: Tensor<f64> = Tensor::randn(&[ids as usize, dim], &mut rng);
    let noise: Tensor<f64> = Tensor::randn(&[labels.len(), dim], &mut rng);
    let mut data = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let row: Vec<f64> = centres.row(l as usize).iter().zip(noise.row(i)).map(|(c, n)| c + spread * n).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(row.into_iter().map(|x| x / n));
    }
    Tensor::new(&[labels.len(), dim], data).unwrap()
}

fn labels_of(ids: u32, per: u32) -> Vec<u32> {
    (0..ids).flat_map(|i| std::iter::repeat(i).take(per as usize)).collect()
}

/// Probability that a positive similarity is below a negative one, ties
/// counted as one half.
fn reversal_probability(pos: &[f64], neg: &[f64]) -> f64 {
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

#[test]
fn identical_positive_pair_has_unit_similarity() {
    let e = Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = LabeledBatch::new(e, vec![7, 7, 9]).unwrap();
    let s = pair_similarities(&b).unwrap();
    assert_eq!(s.positive, vec![1.0]);
    assert_eq!(s.negative, vec![0.0, 0.0]);
}

#[test]
fn pair_counts_match_enumeration() {
    let mut rng = seed::rng(1, &[]);
    let labels: Vec<u32> = (0..40).map(|_| rng.gen_range(0..6)).collect();
    let b = LabeledBatch::new(unit_rows(40, 16, 2), labels.clone()).unwrap();
    let s = pair_similarities(&b).unwrap();
    let mut per: BTreeMap<u32, usize> = BTreeMap::new();
    labels.iter().for_each(|l| *per.entry(*l).or_default() += 1);
    let pos: usize = per.values().map(|n| n * (n - 1) / 2).sum();
    assert_eq!(s.positive.len(), pos);
    assert_eq!(s.negative.len(), 40 * 39 / 2 - pos);
    let (mut bp, mut bn) = (Vec::new(), Vec::new());
    for i in 0..40 {
        for j in i + 1..40 {
            let d: f64 = b.embeddings().row(i).iter().zip(b.embeddings().row(j)).map(|(x, y)| x * y).sum();
            if labels[i] == labels[j] { bp.push(d) } else { bn.push(d) }
        }
    }
    assert_eq!(s.positive, bp);
    assert_eq!(s.negative, bn);
}

#[test]
fn batch_contracts() {
    assert!(pair_similarities(&LabeledBatch::new(unit_rows(3, 4, 3), vec![0, 1, 2]).unwrap()).is_err());
    assert!(pair_similarities(&LabeledBatch::new(unit_rows(3, 4, 3), vec![0, 0, 0]).unwrap()).is_err());
    assert!(LabeledBatch::new(unit_rows(1, 4, 3), vec![0]).is_err());
    assert!(LabeledBatch::new(unit_rows(3, 4, 3), vec![0, 0]).is_err());
    let scaled = unit_rows(3, 4, 3).map(|x| x * 1.01);
    assert!(LabeledBatch::new(scaled, vec![0, 0, 1]).is_err());
}

#[test]
fn soft_histogram_examples() {
    assert_eq!(soft_histogram(&[0.5], 3).unwrap().masses(), &[0.0, 0.5, 0.5]);
    assert_eq!(soft_histogram(&[0.0], 3).unwrap().masses(), &[0.0, 1.0, 0.0]);
    assert_eq!(soft_histogram(&[1.0], 5).unwrap().masses(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(soft_histogram(&[-1.0], 2).unwrap().masses(), &[1.0, 0.0]);
    assert!(soft_histogram(&[1.0 + 5e-7], 4).is_ok());
    assert!(soft_histogram(&[1.0 + 2e-6], 4).is_err());
    assert!(soft_histogram(&[f64::NAN], 4).is_err());
    assert!(soft_histogram(&[], 4).is_err());
    assert!(soft_histogram(&[0.1], 1).is_err());
}

#[test]
fn soft_histogram_mass_and_mean() {
    let mut rng = seed::rng(4, &[]);
    for bins in [2, 7, 200, 2001] {
        let sims: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let h = soft_histogram(&sims, bins).unwrap();
        assert!((h.masses().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(h.masses().iter().all(|&m| m >= 0.0));
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        assert!((h.mean() - mean).abs() < h.step(), "bins {bins}");
    }
}

#[test]
fn histogram_loss_extremes() {
    let ones = vec![1.0; 10];
    let minus = vec![-1.0; 15];
    assert!(histogram_loss(&ones, &minus, DEFAULT_BINS).unwrap() < 1e-6);
    assert!((histogram_loss(&minus, &ones, DEFAULT_BINS).unwrap() - 1.0).abs() < 1e-6);
    assert!(histogram_loss(&[], &ones, DEFAULT_BINS).is_err());
    assert!(histogram_loss(&ones, &[2.0], DEFAULT_BINS).is_err());
}

fn oracle_gap(embeddings: Tensor<f64>, labels: Vec<u32>, bins: usize) -> f64 {
    let s = pair_similarities(&LabeledBatch::new(embeddings, labels).unwrap()).unwrap();
    let loss = histogram_loss(&s.positive, &s.negative, bins).unwrap();
    (loss - reversal_probability(&s.positive, &s.negative)).abs()
}

#[test]
fn histogram_loss_tracks_reversal_probability() {
    let labels = labels_of(16, 4);
    for s in 0..3 {
        assert!(oracle_gap(unit_rows(64, 128, 10 + s), labels.clone(), 200) < 0.03);
        assert!(oracle_gap(clustered(&labels, 128, 1.2, 20 + s), labels.clone(), 200) < 0.03);
    }
}

#[test]
fn histogram_loss_converges_with_many_bins() {
    let labels = labels_of(16, 4);
    for s in 0..3 {
        assert!(oracle_gap(unit_rows(64, 128, 30 + s), labels.clone(), 2001) < 0.005);
        assert!(oracle_gap(clustered(&labels, 128, 1.2, 40 + s), labels.clone(), 2001) < 0.005);
    }
}

#[test]
fn histogram_loss_gradcheck() {
    for (s, bins) in [(50u64, 16usize), (51, 9), (52, 2), (53, 16)] {
        let labels = vec![0, 0, 1, 1, 1, 2, 2, 3];
        let raw: Tensor<f64> = Tensor::randn(&[8, 5], &mut seed::rng(s, &[]));
        let r = check(&[raw], 1e-5, |tape, v| {
            let e = ops::l2_normalize(tape, v[0], 1e-12)?;
            histogram_loss_op(tape, e, &labels, bins)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {s} bins {bins}: {r:?}");
    }
}

#[test]
fn histogram_loss_op_matches_value() {
    let labels = labels_of(4, 3);
    let e = unit_rows(12, 8, 60);
    let s = pair_similarities(&LabeledBatch::new(e.clone(), labels.clone()).unwrap()).unwrap();
    let mut tape = mvreid::tensor::Tape::new();
    let v = tape.param(e);
    let l = histogram_loss_op(&mut tape, v, &labels, 50).unwrap();
    let want = histogram_loss(&s.positive, &s.negative, 50).unwrap();
    assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
}

#[test]
fn triplet_examples() {
    let a = [0.0, 0.0];
    let near = [0.1f64.sqrt(), 0.0];
    let far = [0.0, 0.5f64.sqrt()];
    assert_eq!(triplet_loss(&a, &near, &far, TRIPLET_MARGIN), 0.0);
    assert!((triplet_loss(&a, &far, &near, TRIPLET_MARGIN) - 0.6).abs() < 1e-12);
}

fn random_triplets(rows: usize, n: usize, s: u64) -> Vec<Triplet> {
    let mut rng = seed::rng(s, &[]);
    (0..n)
        .map(|_| Triplet { anchor: rng.gen_range(0..rows), positive: rng.gen_range(0..rows), negative: rng.gen_range(0..rows) })
        .collect()
}

#[test]
fn triplet_batch_mean_matches_scalar_oracle() {
    let e = unit_rows(20, 16, 70);
    let ts = random_triplets(20, 50, 71);
    let want: f64 = ts
        .iter()
        .map(|t| triplet_loss(e.row(t.anchor), e.row(t.positive), e.row(t.negative), TRIPLET_MARGIN))
        .sum::<f64>()
        / 50.0;
    assert!((triplet_loss_mean(&e, &ts, TRIPLET_MARGIN).unwrap() - want).abs() < 1e-12);
    let mut tape = mvreid::tensor::Tape::new();
    let v = tape.param(e);
    let l = triplet_loss_op(&mut tape, v, &ts, TRIPLET_MARGIN).unwrap();
    assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
    assert!(triplet_loss_mean(&unit_rows(3, 4, 1), &[Triplet { anchor: 0, positive: 1, negative: 3 }], 0.2).is_err());
}

#[test]
fn triplet_loss_gradcheck() {
    let raw: Tensor<f64> = Tensor::randn(&[8, 5], &mut seed::rng(72, &[]));
    let ts = random_triplets(8, 12, 73);
    let r = check(&[raw], 1e-5, |tape, v| {
        let e = ops::l2_normalize(tape, v[0], 1e-12)?;
        triplet_loss_op(tape, e, &ts, 1.0)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn centroids() {
    let e: Tensor<f32> = unit_rows(30, 8, 80).cast();
    let mut rng = seed::rng(81, &[]);
    let labels: Vec<u32> = (0..30).map(|_| rng.gen_range(0..5)).collect();
    let c = identity_centroids(&e, &labels).unwrap();
    for (id, got) in &c {
        let rows: Vec<usize> = (0..30).filter(|&i| labels[i] == *id).collect();
        let want: Vec<f64> = (0..8)
            .map(|k| rows.iter().map(|&i| e.row(i)[k] as f64).sum::<f64>() / rows.len() as f64)
            .collect();
        assert_eq!(got, &want);
    }
    let one = centroid_of(&e, &labels, labels[0]).unwrap();
    assert_eq!(one, c[&labels[0]]);
    let single: Tensor<f32> = Tensor::new(&[1, 3], vec![0.6, 0.0, 0.8]).unwrap();
    let want: Vec<f64> = single.data().iter().map(|&x| x as f64).collect();
    assert_eq!(centroid_of(&single, &[4], 4).unwrap(), want);
    let twice = Tensor::stack(&[&single, &single]).unwrap().reshape(&[2, 3]).unwrap();
    assert_eq!(centroid_of(&twice, &[4, 4], 4).unwrap(), want);
    assert!(centroid_of(&e, &labels, 99).is_err());
}

fn row_matrix(rows: &[[f32; 2]]) -> Tensor<f32> {
    Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn planted_outlier_is_hard_positive() {
    let e = row_matrix(&[[1.0, 0.0], [0.99, 0.1], [0.0, 1.0], [0.98, -0.05], [-1.0, 0.0], [-0.99, 0.1]]);
    let labels = [0, 0, 0, 0, 1, 1];
    let ts = mine_hard_triplets(&e, &labels, 40, 1, 5).unwrap();
    for t in ts.iter().filter(|t| labels[t.anchor] == 0) {
        assert_eq!(t.positive, 2);
    }
}

#[test]
fn hard_negative_is_closest_to_centroid() {
    let e = row_matrix(&[[1.0, 0.0], [0.95, 0.3], [-1.0, 0.0], [0.2, 0.9], [-0.9, -0.4]]);
    let labels = [0, 0, 1, 1, 1];
    let ts = mine_hard_triplets(&e, &labels, 40, 1, 6).unwrap();
    // brute force: sample of identity 1 nearest to identity 0's centroid
    let c = centroid_of(&e, &labels, 0).unwrap();
    let d = |i: usize| (e.row(i)[0] as f64 - c[0]).powi(2) + (e.row(i)[1] as f64 - c[1]).powi(2);
    let best = (2..5).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
    assert_eq!(best, 3);
    assert!(ts.iter().filter(|t| labels[t.anchor] == 0).all(|t| t.negative == 3));
}

#[test]
fn mining_contracts() {
    let e = row_matrix(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
    assert!(mine_hard_triplets(&e, &[0, 1, 2], 4, 5, 1).is_err());
    assert!(mine_hard_triplets(&e, &[0, 0, 0], 4, 5, 1).is_err());
    assert!(mine_hard_triplets(&e, &[0, 0, 1], 4, 0, 1).is_err());
    let ts = mine_hard_triplets(&e, &[0, 0, 1], 20, 5, 1).unwrap();
    assert!(ts.iter().all(|t| t.negative == 2 && t.anchor != 2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mined_triplets_are_valid(s in 0u64..1000, ids in 2u32..6, q in 1usize..6) {
        let mut rng = seed::rng(s, &[]);
        let labels: Vec<u32> = (0..24).map(|_| rng.gen_range(0..ids)).collect();
        let e: Tensor<f32> = unit_rows(24, 6, s + 1).cast();
        let mut counts = BTreeMap::new();
        labels.iter().for_each(|l| *counts.entry(*l).or_insert(0usize) += 1);
        prop_assume!(counts.len() >= 2 && counts.values().any(|&n| n >= 2));
        let a = mine_hard_triplets(&e, &labels, 30, q, s).unwrap();
        prop_assert_eq!(&a, &mine_hard_triplets(&e, &labels, 30, q, s).unwrap());
        for t in &a {
            prop_assert!(t.anchor != t.positive);
            prop_assert_eq!(labels[t.anchor], labels[t.positive]);
            prop_assert!(labels[t.negative] != labels[t.anchor]);
            prop_assert!(counts[&labels[t.anchor]] >= 2);
        }
    }

    #[test]
    fn histogram_loss_in_unit_interval(
        pos in prop::collection::vec(-1.0f64..=1.0, 1..40),
        neg in prop::collection::vec(-1.0f64..=1.0, 1..40),
        bins in 2usize..300,
    ) {
        let l = histogram_loss(&pos, &neg, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        let h = soft_histogram(&pos, bins).unwrap();
        prop_assert!((h.masses().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn raising_positives_never_increases_loss(
        pos in prop::collection::vec(-1.0f64..=1.0, 1..40),
        neg in prop::collection::vec(-1.0f64..=1.0, 1..40),
        delta in 1e-6f64..1.0,
        bins in 2usize..300,
    ) {
        let shifted: Vec<f64> = pos.iter().map(|p| (p + delta).min(1.0)).collect();
        let before = histogram_loss(&pos, &neg, bins).unwrap();
        let after = histogram_loss(&shifted, &neg, bins).unwrap();
        prop_assert!(after <= before + 1e-12, "{} > {}", after, before);
    }
}

fn fake_embedder<'a>(labels: &[u32], calls: &'a std::cell::RefCell<Vec<Vec<usize>>>) -> impl Fn(&[usize]) -> mvreid::Result<Tensor<f32>> + 'a {
    let all: Tensor<f32> = clustered(labels, 8, 0.8, 90).cast();
    move |idx: &[usize]| {
        calls.borrow_mut().push(idx.to_vec());
        let data = idx.iter().flat_map(|&i| all.row(i).to_vec()).collect();
        Tensor::new(&[idx.len(), 8], data)
    }
}

#[test]
fn training_batch_plan() {
    let labels = labels_of(12, 6);
    let calls = std::cell::RefCell::new(Vec::new());
    let cfg = MiningConfig { candidates: 5, pool: 40 };
    let plan = build_training_batch(&labels, &cfg, 16, 3, fake_embedder(&labels, &calls)).unwrap();
    {
        let c = calls.borrow();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 40);
        assert!(c[0].windows(2).all(|w| w[0] < w[1]));
    }
    assert!(plan.samples.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(plan.labels, plan.samples.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    assert!(plan.labels.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
    assert_eq!(plan.triplets.len(), 16);
    for t in &plan.triplets {
        assert_eq!(plan.labels[t.anchor], plan.labels[t.positive]);
        assert_ne!(plan.labels[t.anchor], plan.labels[t.negative]);
    }
    let again = build_training_batch(&labels, &cfg, 16, 3, fake_embedder(&labels, &calls)).unwrap();
    assert_eq!(plan, again);
    let other = build_training_batch(&labels, &cfg, 16, 4, fake_embedder(&labels, &calls)).unwrap();
    assert_ne!(plan.samples, other.samples);

    let one = build_training_batch(&labels, &cfg, 1, 5, fake_embedder(&labels, &calls)).unwrap();
    assert!(one.samples.len() <= 3);
    let big = MiningConfig { candidates: 5, pool: 512 };
    build_training_batch(&labels, &big, 4, 5, fake_embedder(&labels, &calls)).unwrap();
    assert_eq!(calls.borrow().last().unwrap().len(), labels.len());
    assert!(build_training_batch(&[3; 10], &cfg, 4, 1, fake_embedder(&[3; 10], &calls)).is_err());
}
