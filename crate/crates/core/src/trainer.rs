//! Training loop: AdamW over per-sample ranking losses with a stepped
//! learning-rate schedule, per-epoch metrics and checkpoints.
//!
//! Per-sample gradients are computed on independent graphs (optionally
//! in parallel) and reduced in a fixed order, so runs are bit-exact
//! reproducible for a given (dataset, config, seed).

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::head::{sample_loss_node, SequenceSample};
use crate::optim::{adamw_step, OptimState};
use crate::params::{derive_seed, ParameterStore};
use crate::report::evaluate_ordering;
use crate::tape::TapeGraph;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// The learning rate drops by 10x every this many epochs.
    pub lr_decay_every: usize,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// How many samples the per-epoch ordering evaluation uses.
    pub eval_samples: usize,
}

impl TrainConfig {
    /// Full-scale profile schedule.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            lr0: 2.5e-5,
            weight_decay: 1e-4,
            epochs: 6,
            batch_size: 8,
            lr_decay_every: 3,
            grad_clip: None,
            seed,
            eval_samples: 200,
        }
    }

    /// Laptop-scale schedule; the tiny model needs a larger rate.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr0: 1e-3,
            weight_decay: 1e-4,
            epochs: 16,
            batch_size: 8,
            lr_decay_every: 3,
            grad_clip: None,
            seed,
            eval_samples: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(CoreError::contract(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(CoreError::contract("batch_size must be >= 1"));
        }
        if self.lr_decay_every == 0 {
            return Err(CoreError::contract("lr_decay_every must be >= 1"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper(7)
    }
}

/// lr0 * 10^(-floor(epoch / decay_every)).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 10f64.powi(-((epoch / cfg.lr_decay_every) as i32))
}

/// One JSON-lines record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub exact_match: f64,
    pub kendall_tau: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub optim: OptimState,
    pub records: Vec<EpochRecord>,
}

/// Loss and per-parameter gradients for one sample.
pub fn sample_grads(
    store: &ParameterStore,
    sample: &SequenceSample,
    cfg: &ModelConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = TapeGraph::new();
    let bound = store.bind(&mut g);
    let loss = sample_loss_node(&mut g, sample, &bound, cfg)?;
    g.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(name, id)| (name.clone(), g.grad(id)))
        .collect();
    Ok((g.value(loss).item()?, grads))
}

/// Mean loss and mean gradients over a batch. Per-sample work runs in
/// parallel; the reduction order is the fixed batch order.
fn batch_grads(
    store: &ParameterStore,
    batch: &[&SequenceSample],
    cfg: &ModelConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let per_sample: Vec<(f64, BTreeMap<String, Tensor>)> = batch
        .par_iter()
        .map(|s| sample_grads(store, s, cfg))
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, Vec<f64>> = store
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
        .collect();
    for (l, grads) in &per_sample {
        loss += l;
        for (name, g) in grads {
            let slot = acc.get_mut(name).expect("grad name mirrors store");
            for (a, v) in slot.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let grads = acc
        .into_iter()
        .map(|(name, mut data)| {
            for v in data.iter_mut() {
                *v *= scale;
            }
            let shape = store.get(&name).expect("name from store").shape().to_vec();
            Tensor::new(shape, data).map(|t| (name, t))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((loss * scale, grads))
}

fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<()> {
    let total: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            let data = g.data().iter().map(|v| v * scale).collect();
            *g = Tensor::new(g.shape().to_vec(), data)?;
        }
    }
    Ok(())
}

fn epoch_metrics(
    store: &ParameterStore,
    eval_set: &[SequenceSample],
    mcfg: &ModelConfig,
) -> Result<(f64, f64)> {
    let report = evaluate_ordering(eval_set, store, mcfg, false)?;
    Ok((report.exact_match, report.mean_kendall_tau))
}

/// Train from scratch. `eval_set` defaults to a slice of the training
/// data when absent. With `out_dir` set, a checkpoint and a metrics
/// line are written per epoch.
pub fn train(
    train_set: &[SequenceSample],
    eval_set: Option<&[SequenceSample]>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    let store = ParameterStore::init(mcfg, tcfg.seed)?;
    let optim = OptimState::new(&store, tcfg.lr0, tcfg.weight_decay);
    train_from(store, optim, 0, train_set, eval_set, mcfg, tcfg, out_dir)
}

/// Continue training from a checkpoint, bit-exactly equivalent to an
/// uninterrupted run with the same configs.
pub fn resume(
    ckpt: Checkpoint,
    train_set: &[SequenceSample],
    eval_set: Option<&[SequenceSample]>,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let mcfg = ckpt.model.clone();
    train_from(
        ckpt.store,
        ckpt.optim,
        ckpt.next_epoch,
        train_set,
        eval_set,
        &mcfg,
        tcfg,
        out_dir,
    )
}

#[allow(clippy::too_many_arguments)]
fn train_from(
    mut store: ParameterStore,
    mut optim: OptimState,
    start_epoch: usize,
    train_set: &[SequenceSample],
    eval_set: Option<&[SequenceSample]>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(CoreError::contract("training set is empty"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }

    let eval_slice = match eval_set {
        Some(s) => s,
        None => &train_set[..train_set.len().min(tcfg.eval_samples)],
    };

    let mut records = Vec::new();
    let mut global_step: u64 = optim.step;

    if start_epoch >= tcfg.epochs {
        // No training: report the current model once.
        let t0 = Instant::now();
        let (exact, tau) = epoch_metrics(&store, eval_slice, mcfg)?;
        let loss = mean_eval_loss(&store, eval_slice, mcfg)?;
        records.push(EpochRecord {
            epoch: start_epoch,
            lr: lr_at(start_epoch, tcfg),
            loss,
            exact_match: exact,
            kendall_tau: tau,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join("ckpt-init.tmpc"), mcfg, &store, &optim, start_epoch)?;
            append_metrics(dir, records.last().unwrap())?;
        }
        return Ok(TrainOutcome { store, optim, records });
    }

    for epoch in start_epoch..tcfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, tcfg);
        optim.lr = lr;

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, &format!("epoch.{epoch}")));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_grads(&store, &batch, mcfg).map_err(|e| at_step(e, global_step))?;
            if let Some(max_norm) = tcfg.grad_clip {
                clip_grads(&mut grads, max_norm)?;
            }
            adamw_step(&mut store, &grads, &mut optim).map_err(|e| at_step(e, global_step))?;
            epoch_loss += loss;
            batches += 1;
            global_step += 1;
        }

        let (exact, tau) = epoch_metrics(&store, eval_slice, mcfg)?;
        let record = EpochRecord {
            epoch,
            lr,
            loss: epoch_loss / batches as f64,
            exact_match: exact,
            kendall_tau: tau,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(dir) = out_dir {
            save_checkpoint(
                &dir.join(format!("ckpt-{epoch:04}.tmpc")),
                mcfg,
                &store,
                &optim,
                epoch + 1,
            )?;
            append_metrics(dir, &record)?;
        }
        records.push(record);
    }
    Ok(TrainOutcome { store, optim, records })
}

fn at_step(e: CoreError, step: u64) -> CoreError {
    match e {
        CoreError::Numerics { context } => CoreError::Numerics {
            context: format!("step {step}: {context}"),
        },
        other => other,
    }
}

/// Mean ranking loss over a sample slice, forward only.
pub fn mean_eval_loss(store: &ParameterStore, samples: &[SequenceSample], mcfg: &ModelConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| crate::head::sample_loss(s, store, mcfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn append_metrics(dir: &Path, record: &EpochRecord) -> Result<()> {
    use std::io::Write;
    let path = dir.join("metrics.jsonl");
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CoreError::io(&path, e))?;
    let line = serde_json::to_string(record).map_err(|e| CoreError::contract(format!("metrics serialization: {e}")))?;
    writeln!(file, "{line}").map_err(|e| CoreError::io(&path, e))
}
