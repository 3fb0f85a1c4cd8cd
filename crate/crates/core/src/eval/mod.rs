//! Metrics, the attention-distribution audit, the ensemble-layer ablation
//! driver, and report emission.

mod ablate;
mod attention;
mod report;

pub use ablate::{ablate_ensemble_layers, AblationCell, AblationRow, AblationTable};
pub use attention::{attention_stats, attention_stats_detailed, AttentionStats, GroupMeans};
pub use report::{emit_report, write_ablation_csv, ReportBundle, ReportFormat};

use crate::data::Dataset;
use crate::model::{EncodedBatch, ModelError, ReadModel};
use crate::objective::{argmax_rows, ObjectiveError};
use crate::train::TrainError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("label spaces incompatible: {detail}")]
    IncompatibleLabels { detail: String },
    #[error("cannot audit {path:?} attention at layer {layer} (k={k}, L={l})")]
    InvalidLayerPath {
        layer: usize,
        path: crate::model::ForwardMode,
        k: usize,
        l: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Map from model class indices onto an evaluation label space, applied to
/// predictions only. Entry `i` is the evaluation label for model class `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
    pub num_examples: usize,
    pub checkpoint_id: Option<String>,
    pub seed: u64,
}

/// Precision, recall, per-class F1, macro F1 and accuracy from prediction /
/// gold pairs. For two-class tasks the plain `f1` is the F1 of class 0 (the
/// entail/duplicate class).
pub fn compute_metrics(
    predictions: &[usize],
    golds: &[usize],
    num_classes: usize,
) -> BTreeMap<String, f64> {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnn = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &g) in predictions.iter().zip(golds) {
        if p == g {
            correct += 1;
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[g] += 1;
        }
    }
    let mut metrics = BTreeMap::new();
    metrics.insert(
        "accuracy".to_string(),
        correct as f64 / predictions.len().max(1) as f64,
    );
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let precision = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let recall = if tp[c] + fnn[c] > 0 {
            tp[c] as f64 / (tp[c] + fnn[c]) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        metrics.insert(format!("precision.class{c}"), precision);
        metrics.insert(format!("recall.class{c}"), recall);
        f1_sum += f1;
        if num_classes == 2 && c == 0 {
            metrics.insert("f1".to_string(), f1);
        }
    }
    metrics.insert("macro_f1".to_string(), f1_sum / num_classes as f64);
    metrics
}

/// Main-path predictions for a whole dataset, in dataset order.
pub fn predict_dataset(model: &ReadModel, dataset: &Dataset) -> Result<Vec<usize>, EvalError> {
    let mut tape = crate::tensor::Tape::new();
    let mut preds = Vec::with_capacity(dataset.len());
    for chunk in dataset.examples.chunks(EVAL_BATCH) {
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
        preds.extend(argmax_rows(tape.value(out.logits), model.config.num_classes));
    }
    Ok(preds)
}

/// Score a model on a dataset. `label_map`, when given, collapses model
/// predictions into the dataset's label space; gold labels are never mapped.
pub fn evaluate(
    model: &ReadModel,
    dataset: &Dataset,
    label_map: Option<&LabelMap>,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let model_classes = model.config.num_classes;
    match label_map {
        None => {
            if model_classes != dataset.num_classes {
                return Err(EvalError::IncompatibleLabels {
                    detail: format!(
                        "model predicts {model_classes} classes, dataset has {}; pass a label map",
                        dataset.num_classes
                    ),
                });
            }
        }
        Some(map) => {
            if map.0.len() != model_classes {
                return Err(EvalError::IncompatibleLabels {
                    detail: format!(
                        "label map covers {} classes, model predicts {model_classes}",
                        map.0.len()
                    ),
                });
            }
            if let Some(&bad) = map.0.iter().find(|&&t| t >= dataset.num_classes) {
                return Err(EvalError::IncompatibleLabels {
                    detail: format!(
                        "label map targets class {bad}, dataset has {}",
                        dataset.num_classes
                    ),
                });
            }
        }
    }
    let mut predictions = predict_dataset(model, dataset)?;
    if let Some(map) = label_map {
        for p in &mut predictions {
            *p = map.0[*p];
        }
    }
    let golds: Vec<usize> = dataset.examples.iter().map(|e| e.label).collect();
    let metrics = compute_metrics(&predictions, &golds, dataset.num_classes);
    Ok(EvalReport {
        dataset_id: String::new(),
        split: String::new(),
        metrics,
        num_examples: dataset.len(),
        checkpoint_id: None,
        seed: 0,
    })
}
