use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::image::RgbImage;
use super::render::{generate_identity, render_capture, CaptureConditions, IdentitySpec, RenderConfig};
use crate::{seed, Error, Result, View};

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "path,identity,view,split,capture_group";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Database,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Database, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Database => "database",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown split {s:?}")))
    }
}

/// Sizes and seeds of a generated dataset. Database and test splits hold the
/// same identities; training identities are disjoint from both.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train_ids: u32,
    pub database_ids: u32,
    pub test_ids: u32,
    /// Capture groups per identity, each a frontal and a profile image.
    pub train_groups: u32,
    pub database_groups: u32,
    pub test_groups: u32,
    pub image_size: usize,
    pub noise_std: f64,
    /// Per-capture pose and colour variation baked into the stored images.
    pub capture: AugmentConfig,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn desk(seed_value: u64) -> Self {
        DatasetConfig {
            train_ids: 40,
            database_ids: 10,
            test_ids: 10,
            train_groups: 8,
            database_groups: 8,
            test_groups: 2,
            image_size: 32,
            noise_std: 6.0,
            capture: capture_variation(32),
            seed: seed_value,
        }
    }

    /// Identity counts of the original corpus; capture groups approximate its
    /// pictures per subject.
    pub fn paper(seed_value: u64) -> Self {
        DatasetConfig {
            train_ids: 387,
            database_ids: 52,
            test_ids: 52,
            train_groups: 16,
            database_groups: 41,
            test_groups: 5,
            image_size: 224,
            capture: capture_variation(224),
            ..DatasetConfig::desk(seed_value)
        }
    }

    pub fn preset(name: &str, seed_value: u64) -> Result<Self> {
        match name {
            "desk" => Ok(DatasetConfig::desk(seed_value)),
            "paper" => Ok(DatasetConfig::paper(seed_value)),
            other => Err(Error::config(format!("unknown dataset preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.train_ids,
            self.database_ids,
            self.test_ids,
            self.train_groups,
            self.database_groups,
            self.test_groups,
        ];
        if counts.contains(&0) {
            return Err(Error::config("identity and capture-group counts must be at least 1"));
        }
        if self.database_ids != self.test_ids {
            return Err(Error::config(format!(
                "database and test identity counts differ ({} vs {})",
                self.database_ids, self.test_ids
            )));
        }
        if self.image_size < 16 {
            return Err(Error::config(format!("image size {} is below 16", self.image_size)));
        }
        let mut cap = self.capture;
        cap.output_size = self.image_size;
        cap.validate()
    }

    /// Identity ids of each split.
    pub fn identities(&self, split: Split) -> std::ops::Range<u32> {
        match split {
            Split::Train => 0..self.train_ids,
            Split::Database | Split::Test => self.train_ids..self.train_ids + self.database_ids,
        }
    }

    /// Capture-group ids of each split; test groups follow the database ones.
    pub fn groups(&self, split: Split) -> std::ops::Range<u32> {
        match split {
            Split::Train => 0..self.train_groups,
            Split::Database => 0..self.database_groups,
            Split::Test => self.database_groups..self.database_groups + self.test_groups,
        }
    }

    pub fn image_count(&self) -> usize {
        Split::ALL.iter().map(|&s| self.identities(s).len() * self.groups(s).len() * 2).sum()
    }
}

/// Mild pose and colour differences between capture sessions.
pub fn capture_variation(size: usize) -> AugmentConfig {
    AugmentConfig {
        rotation_deg: 12.0,
        crop_scale: (0.8, 1.0),
        corner_jitter: 0.05,
        hue_shift: 0.03,
        saturation_scale: (0.85, 1.15),
        output_size: size,
    }
}

/// One stored image: a rendering of `view` with noise and capture variation
/// drawn from `(seed, identity, group, view)`.
pub fn capture(spec: &IdentitySpec, view: View, group: u32, cfg: &DatasetConfig) -> Result<RgbImage> {
    let tags = [0x6361_7074, spec.id as u64, group as u64, view as u64];
    let render = RenderConfig { size: cfg.image_size, noise_std: cfg.noise_std };
    let scene = CaptureConditions::sample(
        &mut seed::rng(cfg.seed, &[0x7363_656e, spec.id as u64, group as u64, view as u64]),
        &mut seed::rng(cfg.seed, &[0x6c69_6768, spec.id as u64, group as u64]),
    );
    let img = render_capture(spec, view, &scene, &render, seed::derive(cfg.seed, &tags))?;
    let mut cap = cfg.capture;
    cap.output_size = cfg.image_size;
    augment(&img, &cap, seed::derive(cfg.seed, &[tags[0] + 1, tags[1], tags[2], tags[3]]))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub identity: u32,
    pub view: View,
    pub split: Split,
    pub capture_group: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.path, r.identity, r.view, r.split, r.capture_group)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        match lines.next().transpose()? {
            Some(h) if h == MANIFEST_HEADER => {}
            other => return Err(Error::Format(format!("manifest header {other:?}, expected {MANIFEST_HEADER:?}"))),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            rows.push(ManifestRow {
                path: f[0].to_string(),
                identity: f[1].parse().map_err(|_| bad("bad identity"))?,
                view: f[2].parse().map_err(|_| bad("bad view"))?,
                split: f[3].parse().map_err(|_| bad("bad split"))?,
                capture_group: f[4].parse().map_err(|_| bad("bad capture group"))?,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Manifest::read_csv(std::fs::File::open(path)?)
    }

    pub fn identities(&self, split: Split) -> BTreeSet<u32> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.identity).collect()
    }

    /// Checks the split layout: test identities are database identities and
    /// no training identity appears in the database.
    pub fn check_layout(&self) -> Result<()> {
        let (train, db, test) = (self.identities(Split::Train), self.identities(Split::Database), self.identities(Split::Test));
        if let Some(id) = test.difference(&db).next() {
            return Err(Error::Format(format!("test identity {id} is missing from the database split")));
        }
        if let Some(id) = train.intersection(&db).next() {
            return Err(Error::Format(format!("identity {id} is in both train and database splits")));
        }
        Ok(())
    }

    /// Every row names an existing file and every file under `images/` has
    /// exactly one row.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        let mut listed = BTreeSet::new();
        for r in &self.rows {
            if !listed.insert(r.path.as_str()) {
                return Err(Error::Format(format!("{} is listed twice", r.path)));
            }
            if !root.join(&r.path).is_file() {
                return Err(Error::Format(format!("{} does not exist", r.path)));
            }
        }
        for f in files_under(&root.join("images"))? {
            let rel = f.strip_prefix(root).expect("under root");
            let rel: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            if !listed.contains(rel.join("/").as_str()) {
                return Err(Error::Format(format!("{} has no manifest row", rel.join("/"))));
            }
        }
        Ok(())
    }
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Renders every image of the dataset under `out/images/<split>/` and writes
/// `out/manifest.csv`. Refuses to write into an existing non-empty image tree.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let images = out.join("images");
    if !files_under(&images)?.is_empty() {
        return Err(Error::config(format!("{} already contains images", images.display())));
    }
    let mut manifest = Manifest::default();
    let mut specs = BTreeMap::new();
    for split in Split::ALL {
        std::fs::create_dir_all(images.join(split.as_str()))?;
        for id in cfg.identities(split) {
            let spec = specs.entry(id).or_insert_with(|| generate_identity(id, cfg.seed));
            for group in cfg.groups(split) {
                for view in View::ALL {
                    let path = format!("images/{split}/{id:04}_{group:02}_{view}.ppm");
                    capture(spec, view, group, cfg)?.save(&out.join(&path))?;
                    manifest.rows.push(ManifestRow { path, identity: id, view, split, capture_group: group });
                }
            }
        }
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Frontal and profile images from one capture session. A view can be
/// missing when the manifest lists only one image for the session.
#[derive(Clone, Debug)]
pub struct CapturePair {
    pub identity: u32,
    pub split: Split,
    pub capture_group: u32,
    pub frontal: Option<RgbImage>,
    pub profile: Option<RgbImage>,
}

impl CapturePair {
    pub fn view(&self, view: View) -> Option<&RgbImage> {
        match view {
            View::Frontal => self.frontal.as_ref(),
            View::Profile => self.profile.as_ref(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.frontal.is_some() && self.profile.is_some()
    }
}

/// Prefixes I/O and format errors with the file they came from.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// A dataset read back from disk, grouped into capture sessions.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pairs: Vec<CapturePair>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = Manifest::load(&manifest_path).map_err(at(&manifest_path))?;
        manifest.check_layout().map_err(at(&manifest_path))?;
        let mut groups: BTreeMap<(Split, u32, u32), [Option<RgbImage>; 2]> = BTreeMap::new();
        for r in &manifest.rows {
            let slot = &mut groups.entry((r.split, r.identity, r.capture_group)).or_default()[r.view as usize];
            if slot.is_some() {
                return Err(Error::Format(format!("duplicate {} image in {}", r.view, r.path)));
            }
            let path = root.join(&r.path);
            *slot = Some(RgbImage::load(&path).map_err(at(&path))?);
        }
        let pairs = groups
            .into_iter()
            .map(|((split, identity, capture_group), [frontal, profile])| CapturePair {
                identity,
                split,
                capture_group,
                frontal,
                profile,
            })
            .collect();
        Ok(Dataset { manifest, pairs })
    }

    /// Sessions whose split is one of `splits`, in (split, identity, group) order.
    pub fn pairs_in(&self, splits: &[Split]) -> Vec<&CapturePair> {
        self.pairs.iter().filter(|p| splits.contains(&p.split)).collect()
    }
}
