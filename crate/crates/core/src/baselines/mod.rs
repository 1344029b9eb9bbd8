//! Hand-crafted descriptors (EigenFaces, LBPH, HOG) scored through the same
//! gallery and KNN path as the learned embeddings.

mod hog;
mod lbp;
mod pca;

pub use hog::{hog_descriptor, HogConfig};
pub use lbp::{lbp_codes, lbph_descriptor, LbphConfig};
pub use pca::{pca_fit, pca_fit_using, pca_project, symmetric_eigen, PcaModel, PcaSolver};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eval::{score_sets, EmbeddingSet, EvalReport, GalleryMode, Protocol, ProtocolConfig, ViewMode};
use crate::synth::{CapturePair, Dataset, RgbImage, Split};
use crate::tensor::Tensor;
use crate::{Error, Result, View};

word_enum! {
    Method { Pca => "pca", Lbph => "lbph", Hog => "hog" }
}

word_enum! {
    /// Normalization already applied inside a descriptor.
    Normalization { None => "none", CellSum => "cell-sum", BlockL2 => "block-l2" }
}

/// Feature vector produced by one of the baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub method: Method,
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl Descriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Unit-length copy for cosine matching. All-zero descriptors have no
    /// direction and are rejected.
    pub fn unit(&self) -> Result<Vec<f32>> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("{} descriptor has non-finite entries", self.method)));
        }
        let norm = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::contract(format!("{} descriptor is all zeros", self.method)));
        }
        Ok(self.values.iter().map(|v| (v / norm) as f32).collect())
    }
}

/// Single-channel image with intensities on the 0–255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims("gray image", &[data.len()], &[width, height]));
        }
        if width == 0 || height == 0 {
            return Err(Error::contract("gray image must be non-empty"));
        }
        Ok(GrayImage { width, height, data })
    }

    /// `0.299 R + 0.587 G + 0.114 B`, rounded to the nearest integer level.
    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img
            .data()
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round().min(255.0) as f32)
            .collect();
        GrayImage { width: img.width(), height: img.height(), data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        GrayImage { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Bilinear sample of `value − reference` at a point inside the image.
    /// Taps with zero weight are never read, so on-grid points may sit on
    /// the last row or column.
    pub(crate) fn sample_relative(&self, x: f64, y: f64, reference: f32) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w != 0.0 {
                    acc += w * (self.get(x0 + dx, y0 + dy) as f64 - reference as f64);
                }
            }
        }
        acc
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Settings shared by the baseline runs.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    /// Requested PCA components; clipped to what the fitting set supports.
    pub pca_components: usize,
    pub lbph: LbphConfig,
    pub hog: HogConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { pca_components: 64, lbph: LbphConfig::default(), hog: HogConfig::default() }
    }
}

/// A descriptor extractor ready to run on frontal images.
#[derive(Clone, Debug)]
pub enum Extractor {
    Pca(PcaModel),
    Lbph(LbphConfig),
    Hog(HogConfig),
}

impl Extractor {
    pub fn describe(&self, img: &GrayImage) -> Result<Descriptor> {
        match self {
            Extractor::Pca(m) => pca_project(m, &img.to_vector()),
            Extractor::Lbph(c) => lbph_descriptor(img, c),
            Extractor::Hog(c) => hog_descriptor(img, c),
        }
    }
}

fn frontal_gray(pairs: &[&CapturePair]) -> (Vec<(u32, u32, GrayImage)>, usize) {
    let kept: Vec<_> = pairs
        .iter()
        .filter_map(|p| p.view(View::Frontal).map(|img| (p.identity, p.capture_group, GrayImage::from_rgb(img))))
        .collect();
    let skipped = pairs.len() - kept.len();
    (kept, skipped)
}

/// Fits the extractor. PCA learns from the frontal images of `fit_pairs`.
pub fn prepare(method: Method, cfg: &BaselineConfig, fit_pairs: &[&CapturePair]) -> Result<Extractor> {
    Ok(match method {
        Method::Lbph => Extractor::Lbph(cfg.lbph),
        Method::Hog => Extractor::Hog(cfg.hog),
        Method::Pca => {
            let (images, _) = frontal_gray(fit_pairs);
            let samples: Vec<Vec<f64>> = images.iter().map(|(_, _, g)| g.to_vector()).collect();
            let dim = samples.first().map_or(0, |s| s.len());
            let k = cfg.pca_components.min(samples.len().saturating_sub(1)).min(dim);
            Extractor::Pca(pca_fit(&samples, k)?)
        }
    })
}

/// Unit-normalized descriptors of the frontal views, extracted on all
/// available cores. Returns the set and the number of pairs without a
/// frontal image.
pub fn describe_captures(extractor: &Extractor, pairs: &[&CapturePair]) -> Result<(EmbeddingSet, usize)> {
    let (images, skipped) = frontal_gray(pairs);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(images.len().max(1));
    let chunk = images.len().div_ceil(workers).max(1);
    let rows: Vec<Vec<f32>> = std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|(_, _, g)| extractor.describe(g)?.unit()).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("descriptor worker panicked")).collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let dim = rows.first().map_or(0, |r| r.len());
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    let vectors = Tensor::new(&[images.len(), dim], data)?;
    let ids = images.iter().map(|(id, _, _)| *id).collect();
    let groups = images.iter().map(|(_, g, _)| *g).collect();
    Ok((EmbeddingSet::new(ids, groups, vectors)?, skipped))
}

/// Scores a baseline under an identification protocol. PCA is fitted on the
/// images a deep model would train on: train and database splits for the
/// closed set, the train split alone for the open set.
pub fn evaluate_baseline(
    dataset: &Dataset,
    method: Method,
    cfg: &BaselineConfig,
    protocol: &ProtocolConfig,
    seed_value: u64,
) -> Result<EvalReport> {
    let protocol = ProtocolConfig { views: ViewMode::Single, ..protocol.clone() };
    protocol.validate()?;
    dataset.manifest.check_layout()?;
    let fit_splits: &[Split] = match protocol.protocol {
        Protocol::Closed => &[Split::Train, Split::Database],
        Protocol::Open => &[Split::Train],
    };
    let extractor = prepare(method, cfg, &dataset.pairs_in(fit_splits))?;
    let (database, _) = describe_captures(&extractor, &dataset.pairs_in(&[Split::Database]))?;
    let train = match protocol.gallery {
        GalleryMode::Extended => Some(describe_captures(&extractor, &dataset.pairs_in(&[Split::Train]))?.0),
        GalleryMode::Database => None,
    };
    let (queries, skipped) = describe_captures(&extractor, &dataset.pairs_in(&[Split::Test]))?;
    let mut report = score_sets(&protocol, &database, train.as_ref(), &queries, skipped)?;
    report.method = method.to_string();
    report.seed = seed_value;
    Ok(report)
}
