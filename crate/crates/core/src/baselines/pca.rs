use super::{Descriptor, Method, Normalization};
use crate::{Error, Result};

/// Mean and leading principal directions of a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` unit rows, ordered by decreasing eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// How the covariance spectrum is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaSolver {
    /// Gram matrix when there are fewer samples than dimensions.
    Auto,
    /// Eigenvectors of the `n×n` Gram matrix mapped back to data space.
    Gram,
    /// Eigenvectors of the `d×d` covariance matrix.
    Covariance,
}

/// Eigen-decomposition of a symmetric matrix (row-major `n×n`) by cyclic
/// Jacobi rotations. Returns eigenvalues in decreasing order and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

fn normalize_sign(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    let s = if lead < 0.0 { -1.0 / n } else { 1.0 / n };
    v.iter_mut().for_each(|x| *x *= s);
}

/// Principal components of `samples` (equal-length rows).
pub fn pca_fit(samples: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    pca_fit_using(samples, k, PcaSolver::Auto)
}

pub fn pca_fit_using(samples: &[Vec<f64>], k: usize, solver: PcaSolver) -> Result<PcaModel> {
    let n = samples.len();
    let d = samples.first().map_or(0, |s| s.len());
    if n < 2 || d == 0 {
        return Err(Error::contract(format!("PCA needs at least two non-empty samples, got {n}")));
    }
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::contract("PCA samples differ in length"));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::contract(format!("k = {k} outside 1..={}", (n - 1).min(d))));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = samples.iter().map(|s| s.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let denom = (n - 1) as f64;
    let use_gram = match solver {
        PcaSolver::Auto => n < d,
        PcaSolver::Gram => true,
        PcaSolver::Covariance => false,
    };
    let (eigenvalues, mut components) = if use_gram {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / denom;
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        let (vals, vecs) = symmetric_eigen(&g, n);
        let comps = vecs[..k]
            .iter()
            .map(|u| {
                let mut c = vec![0.0; d];
                for (ui, row) in u.iter().zip(&centered) {
                    c.iter_mut().zip(row).for_each(|(c, x)| *c += ui * x);
                }
                c
            })
            .collect();
        (vals[..k].to_vec(), comps)
    } else {
        let mut cov = vec![0.0; d * d];
        for row in &centered {
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= denom;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        let (vals, vecs) = symmetric_eigen(&cov, d);
        (vals[..k].to_vec(), vecs[..k].to_vec())
    };
    for c in &mut components {
        if c.iter().all(|x| *x == 0.0) {
            return Err(Error::contract("PCA component vanished; samples span fewer than k directions"));
        }
        normalize_sign(c);
    }
    Ok(PcaModel { mean, components, eigenvalues })
}

/// `(x − mean) · componentsᵀ`.
pub fn pca_project(model: &PcaModel, x: &[f64]) -> Result<Descriptor> {
    if x.len() != model.mean.len() {
        return Err(Error::dims("pca_project", &[x.len()], &[model.mean.len()]));
    }
    let values = model
        .components
        .iter()
        .map(|c| c.iter().zip(x).zip(&model.mean).map(|((c, x), m)| c * (x - m)).sum())
        .collect();
    Ok(Descriptor { method: Method::Pca, values, normalization: Normalization::None })
}
