//! Galleries, exact nearest-neighbour matching and Top-k identification.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::net::{Arch, EmbeddingNet};
use crate::synth::{images_to_tensor, resize, CapturePair, Dataset, RgbImage, Split};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Allowed deviation of a gallery or query norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-4;

macro_rules! word_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::config(format!(concat!("unknown ", stringify!($name), " {:?}"), other))),
                }
            }
        }
    };
}

word_enum! {
    /// Which images are enrolled: the database split alone, or database plus
    /// training split.
    GalleryMode { Database => "database", Extended => "extended" }
}

word_enum! {
    /// Closed: test identities were seen in training. Open: they were not.
    Protocol { Open => "open", Closed => "closed" }
}

word_enum! {
    ViewMode { Single => "single", Multi => "multi" }
}

/// Labelled vectors, one row per capture session.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    identities: Vec<u32>,
    capture_groups: Vec<u32>,
    vectors: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    identity: u32,
    capture_group: u32,
    embedding: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(identities: Vec<u32>, capture_groups: Vec<u32>, vectors: Tensor<f32>) -> Result<Self> {
        let rows = match vectors.shape() {
            &[n, _] => n,
            s => return Err(Error::contract(format!("expected an N×D matrix, got shape {s:?}"))),
        };
        if identities.len() != rows || capture_groups.len() != rows {
            return Err(Error::dims("embedding set", &[identities.len(), capture_groups.len()], &[rows]));
        }
        if vectors.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("embedding set contains non-finite values"));
        }
        Ok(EmbeddingSet { identities, capture_groups, vectors })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn capture_groups(&self) -> &[u32] {
        &self.capture_groups
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<EmbeddingSet> {
        if self.dim() != other.dim() {
            return Err(Error::dims("concat", &[self.dim()], &[other.dim()]));
        }
        let ids = [self.identities.clone(), other.identities.clone()].concat();
        let groups = [self.capture_groups.clone(), other.capture_groups.clone()].concat();
        let data = [self.vectors.data(), other.vectors.data()].concat();
        EmbeddingSet::new(ids, groups, Tensor::new(&[self.len() + other.len(), self.dim()], data)?)
    }

    fn check_unit_norm(&self) -> Result<()> {
        for i in 0..self.len() {
            let n = self.row(i).iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::contract(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(())
    }

    /// One JSON object per line: `identity`, `capture_group`, `embedding`.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for i in 0..self.len() {
            let row = JsonRow {
                identity: self.identities[i],
                capture_group: self.capture_groups[i],
                embedding: self.row(i).to_vec(),
            };
            serde_json::to_writer(&mut *w, &row).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl Read) -> Result<Self> {
        let (mut ids, mut groups, mut data) = (Vec::new(), Vec::new(), Vec::new());
        let mut dim = None;
        for (n, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: JsonRow =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            if *dim.get_or_insert(row.embedding.len()) != row.embedding.len() {
                return Err(Error::Format(format!("line {}: vector length differs", n + 1)));
            }
            ids.push(row.identity);
            groups.push(row.capture_group);
            data.extend(row.embedding);
        }
        let dim = dim.ok_or_else(|| Error::Format("no embeddings".into()))?;
        EmbeddingSet::new(ids, groups, Tensor::new(&[data.len() / dim.max(1), dim], data)?)
    }
}

/// Enrolled embeddings; read-only once built.
#[derive(Clone, Debug)]
pub struct Gallery {
    mode: GalleryMode,
    set: EmbeddingSet,
}

impl Gallery {
    pub fn mode(&self) -> GalleryMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn entries(&self) -> &EmbeddingSet {
        &self.set
    }

    pub fn identity_count(&self) -> usize {
        self.set.identities.iter().collect::<BTreeSet<_>>().len()
    }
}

/// Database rows, followed by the training rows in extended mode. Duplicate
/// rows are kept.
pub fn build_gallery(database: &EmbeddingSet, train: Option<&EmbeddingSet>, mode: GalleryMode) -> Result<Gallery> {
    let set = match (mode, train) {
        (GalleryMode::Database, _) => database.clone(),
        (GalleryMode::Extended, Some(t)) => database.concat(t)?,
        (GalleryMode::Extended, None) => return Err(Error::contract("extended gallery needs training embeddings")),
    };
    if set.is_empty() {
        return Err(Error::contract("empty gallery"));
    }
    set.check_unit_norm()?;
    Ok(Gallery { mode, set })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub identity: u32,
    pub similarity: f32,
}

/// Dot product accumulated left to right in `f32`.
pub fn similarity(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn ranking(a: &(f32, usize), b: &(f32, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` most similar gallery rows, most similar first; equal
/// similarities are ordered by row.
pub fn knn_query(gallery: &Gallery, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 || k > gallery.len() {
        return Err(Error::contract(format!("k = {k} outside 1..={}", gallery.len())));
    }
    if query.len() != gallery.set.dim() {
        return Err(Error::dims("knn_query", &[query.len()], &[gallery.set.dim()]));
    }
    let mut scored: Vec<(f32, usize)> = (0..gallery.len()).map(|i| (similarity(query, gallery.set.row(i)), i)).collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, ranking);
        scored.truncate(k);
    }
    scored.sort_unstable_by(ranking);
    Ok(scored
        .into_iter()
        .map(|(similarity, row)| Neighbor { row, identity: gallery.set.identities[row], similarity })
        .collect())
}

/// For each k in `ks`: whether `identity` is among the identities of the k
/// nearest gallery rows.
pub fn identify(gallery: &Gallery, query: &[f32], identity: u32, ks: &[usize]) -> Result<Vec<bool>> {
    let kmax = ks.iter().copied().max().ok_or_else(|| Error::contract("no k values"))?;
    let nn = knn_query(gallery, query, kmax)?;
    Ok(ks.iter().map(|&k| nn[..k].iter().any(|n| n.identity == identity)).collect())
}

/// Top-k accuracy for each k over all `queries`.
pub fn top_k_accuracy(gallery: &Gallery, queries: &EmbeddingSet, ks: &[usize]) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::contract("no queries"));
    }
    queries.check_unit_norm()?;
    let mut hits = vec![0usize; ks.len()];
    for i in 0..queries.len() {
        for (h, hit) in hits.iter_mut().zip(identify(gallery, queries.row(i), queries.identities[i], ks)?) {
            *h += hit as usize;
        }
    }
    let acc: Vec<f64> = hits.iter().map(|&h| h as f64 / queries.len() as f64).collect();
    for w in ks.iter().zip(&acc).collect::<Vec<_>>().windows(2) {
        let ((k1, a1), (k2, a2)) = (w[0], w[1]);
        if k1 < k2 && a1 > a2 {
            return Err(Error::contract(format!("Top-{k1} accuracy {a1} exceeds Top-{k2} accuracy {a2}")));
        }
    }
    Ok(acc)
}

/// Accuracy of `k` distinct uniform guesses among `n` identities.
pub fn random_topk(k: usize, n: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::contract(format!("random Top-{k} over {n} identities")));
    }
    Ok(k as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub gallery: GalleryMode,
    /// Strictly increasing, all positive.
    pub ks: Vec<usize>,
    pub views: ViewMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { protocol: Protocol::Closed, gallery: GalleryMode::Database, ks: vec![1, 3], views: ViewMode::Multi }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("k values {:?} must be positive and increasing", self.ks)));
        }
        Ok(())
    }
}

/// Accuracies of one evaluation cell. JSON keys are sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub gallery: GalleryMode,
    pub views: ViewMode,
    pub method: String,
    pub seed: u64,
    pub model_fingerprint: String,
    pub queries: usize,
    pub skipped_queries: usize,
    pub gallery_size: usize,
    pub gallery_identities: usize,
    /// `"top1"` → accuracy, one entry per k.
    pub topk: BTreeMap<String, f64>,
    pub random_topk: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.get(&format!("top{k}")).copied()
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Builds the gallery for `cfg`, scores `queries` and fills a report.
/// `skipped_queries` is recorded as given.
pub fn score_sets(
    cfg: &ProtocolConfig,
    database: &EmbeddingSet,
    train: Option<&EmbeddingSet>,
    queries: &EmbeddingSet,
    skipped_queries: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    let gallery = build_gallery(database, train, cfg.gallery)?;
    let acc = top_k_accuracy(&gallery, queries, &cfg.ks)?;
    let n = gallery.identity_count();
    let mut topk = BTreeMap::new();
    let mut random = BTreeMap::new();
    for (&k, a) in cfg.ks.iter().zip(acc) {
        topk.insert(format!("top{k}"), a);
        random.insert(format!("top{k}"), random_topk(k.min(n), n)?);
    }
    Ok(EvalReport {
        protocol: cfg.protocol,
        gallery: cfg.gallery,
        views: cfg.views,
        method: String::new(),
        seed: 0,
        model_fingerprint: String::new(),
        queries: queries.len(),
        skipped_queries,
        gallery_size: gallery.len(),
        gallery_identities: n,
        topk,
        random_topk: random,
    })
}

/// Embeds capture sessions with `net`, resizing images to its input size.
/// Sessions lacking a view the network needs are skipped and counted.
pub fn embed_captures(net: &EmbeddingNet<f32>, pairs: &[&CapturePair]) -> Result<(EmbeddingSet, usize)> {
    const BATCH: usize = 64;
    let views = net.arch().views();
    let size = net.config().input_size;
    let usable: Vec<&CapturePair> = pairs.iter().copied().filter(|p| views.iter().all(|&v| p.view(v).is_some())).collect();
    let skipped = pairs.len() - usable.len();
    let mut data = Vec::new();
    for chunk in usable.chunks(BATCH) {
        let mut batches = Vec::new();
        for &v in &views {
            let imgs: Vec<RgbImage> =
                chunk.iter().map(|p| resize(p.view(v).expect("filtered"), size)).collect::<Result<_>>()?;
            batches.push(images_to_tensor(&imgs.iter().collect::<Vec<_>>())?);
        }
        let e = net.infer(&batches.iter().collect::<Vec<_>>())?;
        data.extend_from_slice(e.data());
    }
    let dim = net.config().embedding_dim;
    let set = EmbeddingSet::new(
        usable.iter().map(|p| p.identity).collect(),
        usable.iter().map(|p| p.capture_group).collect(),
        Tensor::new(&[usable.len(), dim], data)?,
    )?;
    Ok((set, skipped))
}

/// Embeds the database (and, for extended galleries, training) sessions as
/// the gallery and the test sessions as queries, then scores them.
pub fn evaluate_protocol(
    net: &EmbeddingNet<f32>,
    dataset: &Dataset,
    cfg: &ProtocolConfig,
    seed_value: u64,
    fingerprint: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    match (cfg.views, net.arch()) {
        (ViewMode::Multi, Arch::MultiView) | (ViewMode::Single, Arch::SingleView(_)) => {}
        (v, a) => return Err(Error::config(format!("{v}-view protocol cannot use a {a:?} network"))),
    }
    dataset.manifest.check_layout()?;
    let (database, _) = embed_captures(net, &dataset.pairs_in(&[Split::Database]))?;
    let train = match cfg.gallery {
        GalleryMode::Extended => Some(embed_captures(net, &dataset.pairs_in(&[Split::Train]))?.0),
        GalleryMode::Database => None,
    };
    let (queries, skipped) = embed_captures(net, &dataset.pairs_in(&[Split::Test]))?;
    let mut report = score_sets(cfg, &database, train.as_ref(), &queries, skipped)?;
    report.method = match net.arch() {
        Arch::MultiView => "multi-view".to_string(),
        Arch::SingleView(v) => format!("single-view-{v}"),
    };
    report.seed = seed_value;
    report.model_fingerprint = fingerprint.to_string();
    Ok(report)
}
