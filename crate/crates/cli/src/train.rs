//! Mined-batch training loop.

use std::path::Path;

use mvreid::eval::Protocol;
use mvreid::metric::{build_training_batch, histogram_loss_op, triplet_loss_op, BatchPlan, MiningConfig};
use mvreid::net::{Arch, EmbeddingNet};
use mvreid::seed;
use mvreid::synth::{augment, images_to_tensor, resize, AugmentConfig, CapturePair, Dataset, RgbImage, Split};
use mvreid::tensor::{Adam, AdamConfig, Tape, Tensor};
use mvreid::View;

use crate::config::{LossKind, RunConfig};
use crate::error::{CliError, CliResult, Context};

const TAG_INIT: u64 = 0x696e6974;
const TAG_ITER: u64 = 0x69746572;
const TAG_AUGMENT: u64 = 0x61756720;
const INFER_CHUNK: usize = 128;

/// Splits a network may learn from: train and database for the closed set,
/// train alone for the open set.
pub fn training_splits(protocol: Protocol) -> &'static [Split] {
    match protocol {
        Protocol::Closed => &[Split::Train, Split::Database],
        Protocol::Open => &[Split::Train],
    }
}

/// Capture sessions used for training, with their images resized once to
/// the network input.
pub struct TrainSet<'a> {
    pub pairs: Vec<&'a CapturePair>,
    pub labels: Vec<u32>,
    views: Vec<View>,
    size: usize,
    /// One `N×3×S×S` tensor per consumed view.
    clean: Vec<Tensor<f32>>,
}

impl<'a> TrainSet<'a> {
    pub fn new(dataset: &'a Dataset, protocol: Protocol, arch: Arch, size: usize) -> CliResult<Self> {
        let views = arch.views();
        let pairs: Vec<&CapturePair> = dataset
            .pairs_in(training_splits(protocol))
            .into_iter()
            .filter(|p| views.iter().all(|&v| p.view(v).is_some()))
            .collect();
        if pairs.is_empty() {
            return Err(CliError::Contract("no complete capture sessions to train on".into()));
        }
        let mut clean = Vec::new();
        for &v in &views {
            let imgs: Vec<RgbImage> = pairs.iter().map(|p| resize(p.view(v).expect("filtered"), size)).collect::<Result<_, _>>()?;
            clean.push(images_to_tensor(&imgs.iter().collect::<Vec<_>>())?);
        }
        let labels = pairs.iter().map(|p| p.identity).collect();
        Ok(TrainSet { pairs, labels, views, size, clean })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn gather(&self, view: usize, rows: &[usize]) -> Tensor<f32> {
        let t = &self.clean[view];
        let per = t.numel() / t.shape()[0];
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
        }
        Tensor::new(&[rows.len(), 3, self.size, self.size], data).expect("consistent shape")
    }

    /// Un-augmented embeddings of the given sessions.
    pub fn embed(&self, net: &EmbeddingNet<f32>, rows: &[usize]) -> mvreid::Result<Tensor<f32>> {
        let mut data = Vec::new();
        for chunk in rows.chunks(INFER_CHUNK) {
            let batches: Vec<Tensor<f32>> = (0..self.views.len()).map(|v| self.gather(v, chunk)).collect();
            data.extend_from_slice(net.infer(&batches.iter().collect::<Vec<_>>())?.data());
        }
        Tensor::new(&[rows.len(), net.config().embedding_dim], data)
    }

    /// Input batches for `rows`, one per view, augmented when `augment_seed`
    /// is given.
    pub fn inputs(&self, rows: &[usize], augment_seed: Option<u64>) -> CliResult<Vec<Tensor<f32>>> {
        let Some(s) = augment_seed else {
            return Ok((0..self.views.len()).map(|v| self.gather(v, rows)).collect());
        };
        let cfg = AugmentConfig::training(self.size);
        let mut out = Vec::new();
        for &v in &self.views {
            let imgs: Vec<RgbImage> = rows
                .iter()
                .map(|&r| augment(self.pairs[r].view(v).expect("filtered"), &cfg, seed::derive(s, &[TAG_AUGMENT, r as u64, v as u64])))
                .collect::<Result<_, _>>()?;
            out.push(images_to_tensor(&imgs.iter().collect::<Vec<_>>())?);
        }
        Ok(out)
    }
}

/// Loss of `net` on a planned batch, with parameter gradients when
/// requested and the loss is finite.
#[derive(Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Option<Vec<Tensor<f32>>>,
}

pub fn batch_gradients(net: &EmbeddingNet<f32>, inputs: &[Tensor<f32>], plan: &BatchPlan, cfg: &RunConfig, train: bool) -> CliResult<BatchGradients> {
    let mut tape = Tape::new();
    let bound = if train { net.bind(&mut tape) } else { net.bind_frozen(&mut tape) };
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let emb = net.embed(&mut tape, &bound, vars[0], vars.get(1).copied())?;
    let loss = match cfg.loss {
        LossKind::Histogram => histogram_loss_op(&mut tape, emb, &plan.labels, cfg.bins)?,
        LossKind::Triplet => triplet_loss_op(&mut tape, emb, &plan.triplets, cfg.margin)?,
    };
    let value = tape.value(loss).data()[0] as f64;
    if !train || !value.is_finite() {
        return Ok(BatchGradients { loss: value, grads: None });
    }
    tape.backward(loss)?;
    Ok(BatchGradients { loss: value, grads: Some(net.gradients(&tape, &bound)) })
}

/// Loss of `net` on `plan` using clean (un-augmented) images.
pub fn batch_loss(net: &EmbeddingNet<f32>, set: &TrainSet, plan: &BatchPlan, cfg: &RunConfig) -> CliResult<f64> {
    Ok(batch_gradients(net, &set.inputs(&plan.samples, None)?, plan, cfg, false)?.loss)
}

/// Mines one batch with the current network.
pub fn plan_batch(net: &EmbeddingNet<f32>, set: &TrainSet, cfg: &RunConfig, seed_value: u64) -> CliResult<BatchPlan> {
    let mining = MiningConfig { candidates: cfg.candidates, pool: cfg.pool };
    Ok(build_training_batch(&set.labels, &mining, cfg.batch_triplets, seed_value, |pool| set.embed(net, pool))?)
}

pub fn initial_net(cfg: &RunConfig) -> CliResult<EmbeddingNet<f32>> {
    Ok(EmbeddingNet::new(cfg.branch()?, cfg.network_arch(), seed::derive(cfg.seed, &[TAG_INIT]))?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: EmbeddingNet<f32>,
    /// Training loss at every iteration.
    pub losses: Vec<f64>,
    /// Number of capture sessions trained on.
    pub samples: usize,
    /// Logged lines, one per `log_every` iterations and the last one.
    pub log: Vec<String>,
}

fn nonfinite(named: impl Iterator<Item = (String, impl AsRef<[f32]>)>) -> Vec<String> {
    named.filter(|(_, t)| t.as_ref().iter().any(|x| !x.is_finite())).map(|(n, _)| n).collect()
}

/// Names of the offending tensors, for the diagnostic dump.
#[derive(Default)]
struct Offenders {
    gradients: Vec<String>,
    parameters: Vec<String>,
}

fn write_dump(dir: &Path, net: &EmbeddingNet<f32>, iteration: usize, loss: f64, plan: &BatchPlan, bad: Offenders) -> CliResult<std::path::PathBuf> {
    let norms: Vec<(String, f64)> = net
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()))
        .collect();
    let dump = serde_json::json!({
        "iteration": iteration,
        "loss": loss.to_string(),
        "samples": plan.samples,
        "labels": plan.labels,
        "nonfinite_gradients": bad.gradients,
        "nonfinite_parameters": bad.parameters,
        "parameter_norms": norms,
    });
    std::fs::create_dir_all(dir).context(dir.display())?;
    let path = dir.join("nonfinite_dump.json");
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?).context(path.display())?;
    Ok(path)
}

fn nonfinite_error(what: &str, iteration: usize, loss: f64, path: &Path) -> CliError {
    CliError::Contract(format!("non-finite {what} at iteration {iteration} (loss {loss}); dump written to {}", path.display()))
}

/// Trains a fresh network on `dataset` as configured. A non-finite loss or
/// gradient stops training; a diagnostic dump is written to `cfg.out`.
pub fn train_loop(cfg: &RunConfig, dataset: &Dataset) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let mut net = initial_net(cfg)?;
    let set = TrainSet::new(dataset, cfg.protocol, net.arch(), net.config().input_size)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() })?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut log = Vec::new();
    for it in 0..cfg.iterations {
        let iter_seed = seed::derive(cfg.seed, &[TAG_ITER, it as u64]);
        let plan = plan_batch(&net, &set, cfg, iter_seed)?;
        let inputs = set.inputs(&plan.samples, cfg.augment.then_some(iter_seed))?;
        let step = batch_gradients(&net, &inputs, &plan, cfg, true)?;
        let grads = step.grads.unwrap_or_default();
        let names = net.named_params().into_iter().map(|(n, _)| n);
        let gradients = nonfinite(names.zip(grads.iter().map(|g| g.data())));
        if !step.loss.is_finite() || !gradients.is_empty() {
            let path = write_dump(&cfg.out, &net, it, step.loss, &plan, Offenders { gradients, ..Offenders::default() })?;
            return Err(nonfinite_error("loss or gradient", it, step.loss, &path));
        }
        adam.step(&mut net.params_mut(), &grads.iter().collect::<Vec<_>>())?;
        let parameters = nonfinite(net.named_params().into_iter().map(|(n, t)| (n, t.data())));
        if !parameters.is_empty() {
            let path = write_dump(&cfg.out, &net, it, step.loss, &plan, Offenders { parameters, ..Offenders::default() })?;
            return Err(nonfinite_error("parameters after the update", it, step.loss, &path));
        }
        losses.push(step.loss);
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log.push(format!("iter {it} loss {:.9}", step.loss));
        }
    }
    Ok(TrainOutcome { net, losses, samples: set.len(), log })
}
