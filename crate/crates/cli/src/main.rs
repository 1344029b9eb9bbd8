use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvreid::baselines::Method;
use mvreid::eval::GalleryMode;
use mvreid_cli::experiment::{generate, load_dataset, run_baselines, run_embed, run_experiment, run_training};
use mvreid_cli::selfcheck::self_check;
use mvreid_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "mvreid", version, about = "Multi-view metric-learning re-identification")]
struct Cli {
    /// `key = value` configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` override, may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    views: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (into --out, else the configured dataset dir).
    GenData {
        #[arg(long)]
        scale: Option<String>,
    },
    /// Train a network and save its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Write embeddings of every capture session as JSON lines.
    Embed {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint and write JSON reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// `database`, `extended` or `both`.
        #[arg(long)]
        gallery: Option<String>,
        #[arg(long)]
        k: Option<String>,
    },
    /// Score the PCA, LBPH and HOG baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// `pca`, `lbph`, `hog` or `all`.
        #[arg(long, default_value = "all")]
        method: String,
        #[arg(long)]
        gallery: Option<String>,
        #[arg(long)]
        k: Option<String>,
    },
    /// Run gradient, loss and KNN checks.
    SelfCheck {
        /// Negate the convolution input gradient first; the checks must fail.
        #[arg(long)]
        inject_conv_fault: bool,
    },
}

fn apply(cfg: &mut RunConfig, key: &str, value: &Option<impl ToString>) -> CliResult<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()).map_err(|e| e.with_context(format!("--{key}"))),
        None => Ok(()),
    }
}

fn apply_common(cfg: &mut RunConfig, c: &Common) -> CliResult<()> {
    apply(cfg, "dataset", &c.dataset.as_ref().map(|p| p.display()))?;
    apply(cfg, "checkpoint", &c.checkpoint.as_ref().map(|p| p.display()))?;
    apply(cfg, "protocol", &c.protocol)?;
    apply(cfg, "views", &c.views)
}

fn galleries(cfg: &mut RunConfig, flag: &Option<String>) -> CliResult<Vec<GalleryMode>> {
    match flag.as_deref() {
        Some("both") => Ok(vec![GalleryMode::Database, GalleryMode::Extended]),
        other => {
            apply(cfg, "gallery", &other)?;
            Ok(vec![cfg.gallery])
        }
    }
}

fn methods(name: &str) -> CliResult<Vec<Method>> {
    match name {
        "all" => Ok(vec![Method::Pca, Method::Lbph, Method::Hog]),
        m => Ok(vec![m.parse().map_err(|e| CliError::Config(format!("--method {m:?}: {e}")))?]),
    }
}

fn base_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply(&mut cfg, "seed", &cli.seed)?;
    if !matches!(cli.command, Command::GenData { .. }) {
        apply(&mut cfg, "out", &cli.out.as_ref().map(|p| p.display()))?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::GenData { scale } => {
            apply(&mut cfg, "scale", scale)?;
            if let Some(out) = &cli.out {
                cfg.dataset = out.clone();
            }
            let n = generate(&cfg)?;
            println!("wrote {n} images to {}", cfg.dataset.display());
        }
        Command::Train { common, arch, loss, iterations } => {
            apply_common(&mut cfg, common)?;
            apply(&mut cfg, "arch", arch)?;
            apply(&mut cfg, "loss", loss)?;
            apply(&mut cfg, "iterations", iterations)?;
            let ckpt = run_training(&cfg)?;
            println!("checkpoint {}", ckpt.display());
        }
        Command::Embed { common } => {
            apply_common(&mut cfg, common)?;
            for path in run_embed(&cfg, &load_dataset(&cfg)?)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate { common, gallery, k } => {
            apply_common(&mut cfg, common)?;
            apply(&mut cfg, "k", k)?;
            let modes = galleries(&mut cfg, gallery)?;
            for (path, report) in run_experiment(&cfg, &modes, &load_dataset(&cfg)?)? {
                println!("{} {:?} -> {}", report.gallery, report.topk, path.display());
            }
        }
        Command::Baseline { common, method, gallery, k } => {
            apply_common(&mut cfg, common)?;
            apply(&mut cfg, "k", k)?;
            let modes = galleries(&mut cfg, gallery)?;
            let dataset = load_dataset(&cfg)?;
            for mode in modes {
                cfg.gallery = mode;
                for (path, report) in run_baselines(&cfg, &methods(method)?, &dataset)? {
                    println!("{} {} {:?} -> {}", report.method, report.gallery, report.topk, path.display());
                }
            }
        }
        Command::SelfCheck { inject_conv_fault } => {
            let report = self_check(*inject_conv_fault);
            for c in &report.checks {
                println!("{}", c.line());
            }
            println!("self-check took {:.1}s", report.seconds);
            let failed = report.checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(CliError::SelfCheck(format!("{failed} of {} checks failed", report.checks.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_string()).line());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
