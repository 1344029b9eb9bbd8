//! Dataset generation, checkpoint evaluation, embedding export and baseline
//! runs.

use std::io::Write;
use std::path::{Path, PathBuf};

use mvreid::baselines::{evaluate_baseline, BaselineConfig, Method};
use mvreid::eval::{embed_captures, evaluate_protocol, EvalReport, GalleryMode, ProtocolConfig, ViewMode};
use mvreid::net::EmbeddingNet;
use mvreid::synth::{build_dataset, Dataset, DatasetConfig, Split};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Context};
use crate::train::train_loop;

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    Dataset::load(&cfg.dataset).context(format!("dataset {}", cfg.dataset.display()))
}

/// Renders the configured dataset preset into `cfg.dataset`.
pub fn generate(cfg: &RunConfig) -> CliResult<usize> {
    let dc = DatasetConfig::preset(&cfg.scale, cfg.seed)?;
    let manifest = build_dataset(&dc, &cfg.dataset).context(cfg.dataset.display())?;
    Ok(manifest.rows.len())
}

/// Lowercase hex SHA-256 of a file.
pub fn fingerprint(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).context(path.display())?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).context(dir.display())?;
    }
    std::fs::write(path, contents).context(path.display())
}

/// Trains, then writes the checkpoint, the loss log and the effective
/// configuration into `cfg.out`.
pub fn run_training(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dataset = load_dataset(cfg)?;
    let outcome = train_loop(cfg, &dataset)?;
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir).context(dir.display())?;
    }
    outcome.net.to_checkpoint(&ckpt).context(ckpt.display())?;
    write_file(&cfg.log_path(), &(outcome.log.join("\n") + "\n"))?;
    write_file(&cfg.out.join("config.txt"), &cfg.to_text())?;
    Ok(ckpt)
}

fn load_net(cfg: &RunConfig) -> CliResult<(EmbeddingNet<f32>, String)> {
    let ckpt = cfg.checkpoint_path();
    if !ckpt.is_file() {
        return Err(CliError::Io(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let net = EmbeddingNet::from_checkpoint(&ckpt).context(ckpt.display())?;
    Ok((net, fingerprint(&ckpt)?))
}

fn protocol_config(cfg: &RunConfig, gallery: GalleryMode, views: ViewMode) -> ProtocolConfig {
    ProtocolConfig { protocol: cfg.protocol, gallery, ks: cfg.ks.clone(), views }
}

pub fn report_path(out: &Path, report: &EvalReport) -> PathBuf {
    out.join(format!("report-{}-{}-{}.json", report.method, report.protocol, report.gallery))
}

/// Evaluates the checkpoint on every gallery mode in `galleries` and writes
/// one JSON report per mode into `cfg.out`.
pub fn run_experiment(cfg: &RunConfig, galleries: &[GalleryMode], dataset: &Dataset) -> CliResult<Vec<(PathBuf, EvalReport)>> {
    cfg.validate()?;
    let (net, fp) = load_net(cfg)?;
    let views = match net.arch() {
        mvreid::net::Arch::MultiView => ViewMode::Multi,
        mvreid::net::Arch::SingleView(_) => ViewMode::Single,
    };
    if views != cfg.views {
        return Err(CliError::Config(format!("views = {} but the checkpoint holds a {views}-view network", cfg.views)));
    }
    let mut out = Vec::new();
    for &gallery in galleries {
        let report = evaluate_protocol(&net, dataset, &protocol_config(cfg, gallery, views), cfg.seed, &fp)?;
        let path = report_path(&cfg.out, &report);
        write_file(&path, &report.to_json())?;
        out.push((path, report));
    }
    Ok(out)
}

/// Writes embeddings of every capture session as JSON lines, one file per
/// split.
pub fn run_embed(cfg: &RunConfig, dataset: &Dataset) -> CliResult<Vec<PathBuf>> {
    let (net, _) = load_net(cfg)?;
    std::fs::create_dir_all(&cfg.out).context(cfg.out.display())?;
    let mut paths = Vec::new();
    for split in Split::ALL {
        let (set, _) = embed_captures(&net, &dataset.pairs_in(&[split]))?;
        let path = cfg.out.join(format!("embeddings-{split}.jsonl"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path).context(path.display())?);
        set.write_jsonl(&mut w).context(path.display())?;
        w.flush().context(path.display())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Runs the classical baselines on frontal images and writes their reports.
pub fn run_baselines(cfg: &RunConfig, methods: &[Method], dataset: &Dataset) -> CliResult<Vec<(PathBuf, EvalReport)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &method in methods {
        let pc = protocol_config(cfg, cfg.gallery, ViewMode::Single);
        let report = evaluate_baseline(dataset, method, &BaselineConfig::default(), &pc, cfg.seed)?;
        let path = report_path(&cfg.out, &report);
        write_file(&path, &report.to_json())?;
        out.push((path, report));
    }
    Ok(out)
}
