//! Plain `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mvreid::eval::{GalleryMode, Protocol, ViewMode};
use mvreid::net::{Arch, BranchConfig};
use mvreid::View;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Histogram,
    Triplet,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Histogram => "histogram",
            LossKind::Triplet => "triplet",
        })
    }
}

impl FromStr for LossKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "histogram" => Ok(LossKind::Histogram),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(CliError::Config(format!("unknown loss {other:?} (histogram|triplet)"))),
        }
    }
}

/// Everything a training or evaluation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Dataset preset for `gen-data` (`desk` or `paper`).
    pub scale: String,
    pub out: PathBuf,
    pub protocol: Protocol,
    pub views: ViewMode,
    /// View consumed by single-view networks.
    pub single_view: View,
    /// Architecture preset name (`compact`, `desk`, `paper`, `tiny`).
    pub arch: String,
    pub loss: LossKind,
    pub bins: usize,
    pub margin: f64,
    pub batch_triplets: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    /// Candidates per side for hard positive/negative mining.
    pub candidates: usize,
    /// Samples embedded per iteration to mine from.
    pub pool: usize,
    pub log_every: usize,
    pub gallery: GalleryMode,
    pub ks: Vec<usize>,
    /// Defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            scale: "desk".into(),
            out: PathBuf::from("runs"),
            protocol: Protocol::Closed,
            views: ViewMode::Multi,
            single_view: View::Frontal,
            arch: "compact".into(),
            loss: LossKind::Histogram,
            bins: mvreid::metric::DEFAULT_BINS,
            margin: mvreid::metric::TRIPLET_MARGIN,
            batch_triplets: 64,
            iterations: 2000,
            lr: 1e-3,
            seed: 0,
            augment: true,
            candidates: 5,
            pool: 256,
            log_every: 50,
            gallery: GalleryMode::Database,
            ks: vec![1, 3],
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| CliError::Config(format!("{key} = {value:?}: {e}")))
}

pub fn parse_ks(value: &str) -> CliResult<Vec<usize>> {
    value.split(',').map(|k| parse("k", k.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "scale" => {
                mvreid::synth::DatasetConfig::preset(value, 0)?;
                self.scale = value.to_string();
            }
            "out" => self.out = PathBuf::from(value),
            "protocol" => self.protocol = parse(key, value)?,
            "views" => self.views = parse(key, value)?,
            "single_view" => self.single_view = parse(key, value)?,
            "arch" => {
                BranchConfig::preset(value)?;
                self.arch = value.to_string();
            }
            "loss" => self.loss = value.parse()?,
            "bins" => self.bins = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "batch_triplets" => self.batch_triplets = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "candidates" => self.candidates = parse(key, value)?,
            "pool" => self.pool = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "gallery" => self.gallery = parse(key, value)?,
            "k" | "ks" => self.ks = parse_ks(value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            other => return Err(CliError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored; a key may appear only once.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value).map_err(|e| e.with_context(format!("line {}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text).map_err(|e| e.with_context(path.display()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let branch = self.branch()?;
        if self.bins < 2 {
            return Err(CliError::Config(format!("bins = {} (need at least 2)", self.bins)));
        }
        if self.batch_triplets == 0 || self.candidates == 0 || self.pool < 3 {
            return Err(CliError::Config("batch_triplets and candidates must be positive, pool at least 3".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(CliError::Config(format!("margin = {} must be non-negative", self.margin)));
        }
        if self.log_every == 0 {
            return Err(CliError::Config("log_every must be positive".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(CliError::Config(format!("k list {:?} must be non-empty and positive", self.ks)));
        }
        branch.validate()?;
        Ok(())
    }

    pub fn branch(&self) -> CliResult<BranchConfig> {
        Ok(BranchConfig::preset(&self.arch)?)
    }

    pub fn network_arch(&self) -> Arch {
        match self.views {
            ViewMode::Multi => Arch::MultiView,
            ViewMode::Single => Arch::SingleView(self.single_view),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.out.join("train.log")
    }

    /// Canonical text form; parsing it back gives the same configuration.
    pub fn to_text(&self) -> String {
        let ks: Vec<String> = self.ks.iter().map(|k| k.to_string()).collect();
        let mut lines = vec![
            format!("dataset = {}", self.dataset.display()),
            format!("scale = {}", self.scale),
            format!("out = {}", self.out.display()),
            format!("protocol = {}", self.protocol),
            format!("views = {}", self.views),
            format!("single_view = {}", self.single_view),
            format!("arch = {}", self.arch),
            format!("loss = {}", self.loss),
            format!("bins = {}", self.bins),
            format!("margin = {}", self.margin),
            format!("batch_triplets = {}", self.batch_triplets),
            format!("iterations = {}", self.iterations),
            format!("lr = {}", self.lr),
            format!("seed = {}", self.seed),
            format!("augment = {}", self.augment),
            format!("candidates = {}", self.candidates),
            format!("pool = {}", self.pool),
            format!("log_every = {}", self.log_every),
            format!("gallery = {}", self.gallery),
            format!("k = {}", ks.join(",")),
        ];
        if let Some(c) = &self.checkpoint {
            lines.push(format!("checkpoint = {}", c.display()));
        }
        lines.join("\n") + "\n"
    }
}
