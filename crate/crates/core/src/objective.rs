//! The debiasing objective: a multiplicative ensemble of the two heads'
//! predictions over a shared batch, with every gradient path into the biased
//! side severed. The biased head is trained by its own cross entropy; the
//! ensemble term trains everything else through the frozen biased factors.
//! Inference uses the main path alone.

use crate::model::{EncodedBatch, ForwardMode, ModelError, ReadModel};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("probability vectors differ in length: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("division by non-positive probability {value} at index {index}")]
    DivisionDomain { index: usize, value: f64 },
}

/// The two loss terms of a training step and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub loss_e: f64,
    pub loss_b: f64,
    pub total: f64,
}

/// Tape handles for the loss terms; values are read off the tape.
pub struct LossVars {
    pub loss_e: Var,
    pub loss_b: Var,
    pub total: Var,
}

/// Multiplicative combination of two log-probability rows, renormalized in
/// log space: `log_pe = lognormalize(log_pm + stop_gradient(log_pb))`.
///
/// Symmetric in its arguments at the value level; gradients flow only into
/// `log_pm`. Adding a per-row constant to either input does not change the
/// result, so unnormalized inputs are accepted.
pub fn poe_combine(tape: &mut Tape, log_pm: Var, log_pb: Var) -> Result<Var, ObjectiveError> {
    for (var, context) in [(log_pm, "log_pm"), (log_pb, "log_pb")] {
        if tape.value(var).iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite { context });
        }
    }
    let frozen = tape.stop_gradient(log_pb);
    let sum = tape.add(log_pm, frozen)?;
    Ok(tape.log_softmax_rows(sum)?)
}

/// Both loss terms from one batch: `loss_b` is the cross entropy of the
/// bias-path prediction; `loss_e` is the cross entropy of the ensemble
/// prediction, whose biased factor is the same bias-path forward, frozen.
/// One bias-path forward serves both terms.
pub fn read_loss_on_tape(
    tape: &mut Tape,
    model: &ReadModel,
    mounted: &[Var],
    batch: &EncodedBatch,
    alpha: f64,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<LossVars, ObjectiveError> {
    let bias_out = model.forward_on_tape(
        tape,
        mounted,
        batch,
        ForwardMode::BiasPath,
        alpha,
        dropout_rng.as_deref_mut(),
        None,
    )?;
    let log_pb = tape.log_softmax_rows(bias_out.logits)?;
    let loss_b = tape.cross_entropy_from_log_probs(log_pb, &batch.labels)?;

    let ens_out = model.forward_on_tape(
        tape,
        mounted,
        batch,
        ForwardMode::EnsemblePath,
        alpha,
        dropout_rng.take(),
        None,
    )?;
    let log_pm = tape.log_softmax_rows(ens_out.logits)?;
    let log_pe = poe_combine(tape, log_pm, log_pb)?;
    let loss_e = tape.cross_entropy_from_log_probs(log_pe, &batch.labels)?;

    let total = tape.add(loss_e, loss_b)?;
    Ok(LossVars { loss_e, loss_b, total })
}

/// Single-path baseline objective: plain cross entropy of the main path.
pub fn vanilla_loss_on_tape(
    tape: &mut Tape,
    model: &ReadModel,
    mounted: &[Var],
    batch: &EncodedBatch,
    dropout_rng: Option<&mut Rng>,
) -> Result<LossVars, ObjectiveError> {
    let out = model.forward_on_tape(
        tape,
        mounted,
        batch,
        ForwardMode::MainPath,
        model.config.alpha,
        dropout_rng,
        None,
    )?;
    let logp = tape.log_softmax_rows(out.logits)?;
    let loss = tape.cross_entropy_from_log_probs(logp, &batch.labels)?;
    // Report the single term as the ensemble slot; there is no biased term.
    let zero = tape.constant(vec![], vec![0.0])?;
    Ok(LossVars {
        loss_e: loss,
        loss_b: zero,
        total: loss,
    })
}

/// Loss values for one batch on a fresh tape.
pub fn read_loss(
    model: &ReadModel,
    batch: &EncodedBatch,
    alpha: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    let mut tape = Tape::new();
    let mounted = model.mount(&mut tape);
    let vars = read_loss_on_tape(&mut tape, model, &mounted[..], batch, alpha, None)?;
    Ok(LossBreakdown {
        loss_e: tape.value(vars.loss_e)[0],
        loss_b: tape.value(vars.loss_b)[0],
        total: tape.value(vars.total)[0],
    })
}

/// Row argmax with ties broken toward the lowest class index.
pub fn argmax_rows(values: &[f64], num_classes: usize) -> Vec<usize> {
    values
        .chunks_exact(num_classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Deployed prediction rule: main path only, argmax over classes,
/// order-preserving over the batch.
pub fn predict(model: &ReadModel, batch: &EncodedBatch) -> Result<Vec<usize>, ObjectiveError> {
    let logits = model.run_forward(batch, ForwardMode::MainPath)?;
    Ok(argmax_rows(logits.values(), model.config.num_classes))
}

/// Recover the implied main distribution from an ensemble distribution and a
/// biased distribution: `normalize(p_e / p_b)`.
///
/// An analysis utility showing why a multiplicative attention ensemble is
/// unstable: for `p_e = [1e-8, 1-1e-8]` and `p_b = [1e-6, 1-1e-6]` the result
/// is `[0.009901, 0.990099]` — a shift of the first candidate from nearly 0
/// to 1e-6 maps an extreme probability to a moderate one. Reports quoting
/// `[0.99, 0.01]` for this input correspond to the swapped argument order,
/// i.e. `infer_residual_distribution(p_b, p_e)`.
pub fn infer_residual_distribution(p_e: &[f64], p_b: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
    if p_e.len() != p_b.len() {
        return Err(ObjectiveError::LengthMismatch {
            lhs: p_e.len(),
            rhs: p_b.len(),
        });
    }
    for (index, &value) in p_b.iter().enumerate() {
        if value <= 0.0 || !value.is_finite() {
            return Err(ObjectiveError::DivisionDomain { index, value });
        }
    }
    if p_e.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ObjectiveError::NonFinite { context: "p_e" });
    }
    let ratios: Vec<f64> = p_e.iter().zip(p_b).map(|(e, b)| e / b).collect();
    let sum: f64 = ratios.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(ObjectiveError::NonFinite { context: "ratio normalization" });
    }
    Ok(ratios.into_iter().map(|r| r / sum).collect())
}
