//! Optimization loop: both loss terms from the same batch every step, one
//! backward sweep, one optimizer update over all partitions, per-epoch dev
//! evaluation through the deployed (main-path) prediction rule, and best-dev
//! checkpoint selection. Fixed seeds reproduce the run bit-for-bit.

mod adamw;
mod checkpoint;

pub use adamw::{lr_at, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamManifest, CHECKPOINT_VERSION,
};

use crate::data::Dataset;
use crate::model::{EncodedBatch, ModelError, ParamPartition, ReadModel};
use crate::objective::{
    argmax_rows, read_loss_on_tape, vanilla_loss_on_tape, LossVars, ObjectiveError,
};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SHUFFLE_STREAM: u64 = 0x5487;
const DROPOUT_STREAM: u64 = 0xd607;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("{which} dataset is empty")]
    EmptyDataset { which: &'static str },
    #[error("checkpoint header is not readable")]
    BadHeader,
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("checkpoint blob {name} failed its checksum")]
    ChecksumFailure { name: String },
    #[error("checkpoint truncated while reading {name}")]
    Truncated { name: String },
    #[error("manifest mismatch: {detail}")]
    ManifestMismatch { detail: String },
    #[error("gradient partition violated at step {step} on {name}")]
    PartitionViolation { step: usize, name: String },
}

/// Optimization hyperparameters. `alpha` and `k` mirror the model knobs so
/// one flat config describes a whole run; `k` applies when the harness
/// constructs the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub alpha: f64,
    pub k: usize,
    #[serde(default)]
    pub vanilla: bool,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub debug_grad_partitions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 5,
            warmup_steps: 0,
            weight_decay: 0.01,
            seed: 42,
            alpha: 0.1,
            k: 4,
            vanilla: false,
            grad_clip: None,
            debug_grad_partitions: false,
        }
    }
}

/// Gradient norms per partition (shared, main-only, bias-only), measured for
/// each loss term separately. Recorded in debug mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionGradNorms {
    pub from_loss_e: [f64; 3],
    pub from_loss_b: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss_e: f64,
    pub mean_loss_b: f64,
    pub dev_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub partition_grad_norms: Option<PartitionGradNorms>,
}

/// Mean main-path accuracy over a dataset, in deterministic order.
pub fn dev_accuracy(
    model: &ReadModel,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset { which: "dev" });
    }
    let mut correct = 0usize;
    let mut tape = Tape::new();
    for chunk in dataset.examples.chunks(batch_size) {
        tape.reset();
        let batch = EncodedBatch::pack(chunk, &model.config)?;
        let mounted = model.mount(&mut tape);
        let out = model.forward_on_tape(
            &mut tape,
            &mounted,
            &batch,
            crate::model::ForwardMode::MainPath,
            model.config.alpha,
            None,
            None,
        )?;
        let preds = argmax_rows(tape.value(out.logits), model.config.num_classes);
        correct += preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn train(
    model: &mut ReadModel,
    train_set: &Dataset,
    dev_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochStats>), TrainError> {
    train_observed(model, train_set, dev_set, cfg, |_| {})
}

/// Like [`train`], reporting each epoch's stats to `observer` as they land.
pub fn train_observed(
    model: &mut ReadModel,
    train_set: &Dataset,
    dev_set: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochStats),
) -> Result<(Checkpoint, Vec<EpochStats>), TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset { which: "train" });
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptyDataset { which: "dev" });
    }
    if cfg.epochs == 0 {
        let ckpt = Checkpoint::from_model(model, Some(cfg), 0, None);
        return Ok((ckpt, Vec::new()));
    }

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut optimizer = AdamW::new(model.params(), cfg.weight_decay);
    let mut shuffle_rng = Rng::derive(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = Rng::derive(cfg.seed, DROPOUT_STREAM);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut chunk_buf: Vec<crate::data::Example> = Vec::with_capacity(cfg.batch_size);

    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sum_loss_e = 0.0;
        let mut sum_loss_b = 0.0;
        let mut last_norms = None;

        for chunk in order.chunks(cfg.batch_size) {
            chunk_buf.clear();
            chunk_buf.extend(chunk.iter().map(|&i| train_set.examples[i].clone()));
            let batch = EncodedBatch::pack(&chunk_buf, &model.config)?;

            tape.reset();
            let mounted = model.mount(&mut tape);
            let vars = step_loss(&mut tape, model, &mounted, &batch, cfg, &mut dropout_rng)
                .map_err(|e| divergence_or(e, step))?;
            let total = tape.value(vars.total)[0];
            if !total.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            sum_loss_e += tape.value(vars.loss_e)[0];
            sum_loss_b += tape.value(vars.loss_b)[0];

            if cfg.debug_grad_partitions && !cfg.vanilla {
                last_norms = Some(check_partitions(&mut tape, model, &mounted, &vars, step)?);
            }

            tape.backward(vars.total)?;
            let grad_scale = match cfg.grad_clip {
                Some(max_norm) => {
                    let norm = global_grad_norm(&tape, &mounted);
                    if norm > max_norm {
                        max_norm / norm
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            let lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_steps);
            optimizer.step_from_tape(model.params_mut(), &tape, &mounted, lr, grad_scale)?;
            step += 1;
        }

        let dev_acc = dev_accuracy(model, dev_set, cfg.batch_size)?;
        let stats = EpochStats {
            epoch,
            mean_loss_e: sum_loss_e / steps_per_epoch as f64,
            mean_loss_b: sum_loss_b / steps_per_epoch as f64,
            dev_accuracy: dev_acc,
            partition_grad_norms: last_norms,
        };
        observer(&stats);
        history.push(stats);
        // Strict improvement keeps the earliest best epoch on ties.
        if best.as_ref().is_none_or(|(acc, _)| dev_acc > *acc) {
            best = Some((
                dev_acc,
                Checkpoint::from_model(model, Some(cfg), step as u64, Some(dev_acc)),
            ));
        }
    }
    Ok((best.expect("at least one epoch ran").1, history))
}

fn step_loss(
    tape: &mut Tape,
    model: &ReadModel,
    mounted: &[Var],
    batch: &EncodedBatch,
    cfg: &TrainConfig,
    dropout_rng: &mut Rng,
) -> Result<LossVars, ObjectiveError> {
    if cfg.vanilla {
        vanilla_loss_on_tape(tape, model, mounted, batch, Some(dropout_rng))
    } else {
        read_loss_on_tape(tape, model, mounted, batch, cfg.alpha, Some(dropout_rng))
    }
}

/// Numeric blowups inside a step surface as divergence with the step index.
fn divergence_or(e: ObjectiveError, step: usize) -> TrainError {
    match &e {
        ObjectiveError::NonFinite { .. }
        | ObjectiveError::Tensor(TensorError::NonFinite { .. })
        | ObjectiveError::Tensor(TensorError::NotLogProbRow { .. }) => TrainError::Diverged { step },
        _ => TrainError::Objective(e),
    }
}

fn global_grad_norm(tape: &Tape, mounted: &[Var]) -> f64 {
    mounted
        .iter()
        .filter_map(|v| tape.grad(*v))
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Debug mode: backward each loss term separately, assert the partition
/// contract exactly, and report per-partition gradient norms.
fn check_partitions(
    tape: &mut Tape,
    model: &ReadModel,
    mounted: &[Var],
    vars: &LossVars,
    step: usize,
) -> Result<PartitionGradNorms, TrainError> {
    let part_idx = |p: ParamPartition| match p {
        ParamPartition::Shared => 0usize,
        ParamPartition::MainOnly => 1,
        ParamPartition::BiasOnly => 2,
    };
    let mut norms = PartitionGradNorms {
        from_loss_e: [0.0; 3],
        from_loss_b: [0.0; 3],
    };
    for (term, forbidden, sink) in [
        (vars.loss_e, ParamPartition::BiasOnly, 0usize),
        (vars.loss_b, ParamPartition::MainOnly, 1),
    ] {
        tape.zero_grads();
        tape.backward(term)?;
        for (param, var) in model.params().iter().zip(mounted) {
            let sq: f64 = tape
                .grad(*var)
                .map_or(0.0, |g| g.iter().map(|x| x * x).sum());
            if param.partition == forbidden && sq != 0.0 {
                return Err(TrainError::PartitionViolation {
                    step,
                    name: param.name.clone(),
                });
            }
            let bucket = part_idx(param.partition);
            if sink == 0 {
                norms.from_loss_e[bucket] += sq;
            } else {
                norms.from_loss_b[bucket] += sq;
            }
        }
    }
    for n in norms.from_loss_e.iter_mut().chain(norms.from_loss_b.iter_mut()) {
        *n = n.sqrt();
    }
    tape.zero_grads();
    Ok(norms)
}
