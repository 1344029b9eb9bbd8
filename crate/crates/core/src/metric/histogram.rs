use super::{check_rows, dot, PairIndex, SIMILARITY_TOL};
use crate::tensor::{ops, Real, Tape, Var};
use crate::{Error, Result};

/// Probability masses on `R` nodes spaced uniformly over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHistogram {
    masses: Vec<f64>,
}

impl SimilarityHistogram {
    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    /// Spacing between neighbouring nodes.
    pub fn step(&self) -> f64 {
        2.0 / (self.bins() - 1) as f64
    }

    pub fn node(&self, r: usize) -> f64 {
        -1.0 + r as f64 * self.step()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Mean of the node positions weighted by mass.
    pub fn mean(&self) -> f64 {
        self.masses.iter().enumerate().map(|(r, m)| m * self.node(r)).sum()
    }

    /// Running sums of the masses, `cdf[r] = Σ_{q ≤ r} masses[q]`.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect()
    }
}

/// Locates `s` between nodes `r0` and `r0 + 1`; returns `(r0, t)` with the
/// weight `t` going to the upper node.
fn locate(s: f64, bins: usize) -> Result<(usize, f64)> {
    if !(s.abs() <= 1.0 + SIMILARITY_TOL) {
        return Err(Error::contract(format!("similarity {s} outside [-1, 1]")));
    }
    let u = (s.clamp(-1.0, 1.0) + 1.0) * (bins - 1) as f64 / 2.0;
    let r0 = (u.floor() as usize).min(bins - 2);
    Ok((r0, u - r0 as f64))
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::contract(format!("histogram needs at least 2 nodes, got {bins}")));
    }
    Ok(())
}

/// Soft histogram: each similarity splits unit weight linearly between its
/// two enclosing nodes; masses are divided by the sample count.
pub fn soft_histogram(sims: &[f64], bins: usize) -> Result<SimilarityHistogram> {
    check_bins(bins)?;
    if sims.is_empty() {
        return Err(Error::contract("histogram of an empty similarity list"));
    }
    let mut masses = vec![0.0; bins];
    let w = 1.0 / sims.len() as f64;
    for &s in sims {
        let (r0, t) = locate(s, bins)?;
        masses[r0] += (1.0 - t) * w;
        masses[r0 + 1] += t * w;
    }
    Ok(SimilarityHistogram { masses })
}

/// Estimated probability that a positive pair is less similar than a
/// negative one: `Σ_r p⁻[r] · Σ_{q ≤ r} p⁺[q]`.
pub fn histogram_loss(positive: &[f64], negative: &[f64], bins: usize) -> Result<f64> {
    let pos = soft_histogram(positive, bins)?;
    let neg = soft_histogram(negative, bins)?;
    Ok(neg.masses().iter().zip(pos.cdf()).map(|(m, c)| m * c).sum::<f64>().clamp(0.0, 1.0))
}

/// Loss together with its derivative with respect to every positive and
/// negative similarity.
pub fn histogram_loss_grads(positive: &[f64], negative: &[f64], bins: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let pos = soft_histogram(positive, bins)?;
    let neg = soft_histogram(negative, bins)?;
    let pos_cdf = pos.cdf();
    let loss = neg.masses().iter().zip(&pos_cdf).map(|(m, c)| m * c).sum::<f64>();
    // dL/dp⁺[q] = Σ_{r ≥ q} p⁻[r]; dL/dp⁻[r] = cdf⁺[r]
    let mut neg_tail = vec![0.0; bins];
    let mut acc = 0.0;
    for r in (0..bins).rev() {
        acc += neg.masses()[r];
        neg_tail[r] = acc;
    }
    let inv_step = (bins - 1) as f64 / 2.0;
    let dsim = |sims: &[f64], node_grad: &[f64]| -> Result<Vec<f64>> {
        let scale = inv_step / sims.len() as f64;
        sims.iter()
            .map(|&s| {
                let (r0, _) = locate(s, bins)?;
                Ok((node_grad[r0 + 1] - node_grad[r0]) * scale)
            })
            .collect()
    };
    let gp = dsim(positive, &neg_tail)?;
    let gn = dsim(negative, &pos_cdf)?;
    Ok((loss.clamp(0.0, 1.0), gp, gn))
}

/// Differentiable histogram loss over all pairs of a `B×D` embedding
/// variable with the given labels.
pub fn histogram_loss_op<T: Real>(tape: &mut Tape<T>, embeddings: Var, labels: &[u32], bins: usize) -> Result<Var> {
    let e = tape.value(embeddings);
    let rows = check_rows(e, labels)?;
    let d = e.shape()[1];
    let idx = PairIndex::new(labels)?;
    let sims = |pairs: &[(usize, usize)]| -> Vec<f64> { pairs.iter().map(|&(i, j)| dot(e.row(i), e.row(j))).collect() };
    let (loss, gp, gn) = histogram_loss_grads(&sims(&idx.positive), &sims(&idx.negative), bins)?;
    let mut grad = vec![0.0f64; rows * d];
    for (pairs, g) in [(&idx.positive, &gp), (&idx.negative, &gn)] {
        for (&(i, j), &gs) in pairs.iter().zip(g.iter()) {
            if gs == 0.0 {
                continue;
            }
            for k in 0..d {
                grad[i * d + k] += gs * e.row(j)[k].f64();
                grad[j * d + k] += gs * e.row(i)[k].f64();
            }
        }
    }
    let local = grad.into_iter().map(T::of).collect();
    Ok(ops::fused_scalar(tape, T::of(loss), vec![(embeddings, local)]))
}
