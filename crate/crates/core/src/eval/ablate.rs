//! Ensemble-depth ablation: train one model per (k, seed), score the
//! in-distribution dev set and both challenge splits, report mean and
//! standard deviation per cell.

use super::{evaluate, EvalError};
use crate::data::ExperimentSplits;
use crate::model::{ModelConfig, ReadModel};
use crate::train::{train, TrainConfig};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationCell {
    pub mean: f64,
    pub sd: f64,
}

fn cell(values: &[f64]) -> AblationCell {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    AblationCell { mean, sd }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub k: usize,
    pub id_dev: AblationCell,
    pub ood_decorrelated: AblationCell,
    pub ood_adversarial: AblationCell,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Train one model per (k, seed) and tabulate accuracy on the three
/// evaluation splits. Rows follow `k_values` order.
pub fn ablate_ensemble_layers(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    splits: &ExperimentSplits,
    k_values: &[usize],
    seeds: &[u64],
) -> Result<AblationTable, EvalError> {
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut dev_accs = Vec::with_capacity(seeds.len());
        let mut dec_accs = Vec::with_capacity(seeds.len());
        let mut adv_accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = model_cfg.clone();
            cfg.num_ensemble_layers = k;
            let mut tc = train_cfg.clone();
            tc.seed = seed;
            tc.k = k;
            let mut model = ReadModel::new(cfg, seed)?;
            let (best, _) = train(&mut model, &splits.train, &splits.dev, &tc)?;
            let best_model = best.to_model()?;
            dev_accs.push(evaluate(&best_model, &splits.dev, None)?.metrics["accuracy"]);
            dec_accs.push(evaluate(&best_model, &splits.ood_decorrelated, None)?.metrics["accuracy"]);
            adv_accs.push(evaluate(&best_model, &splits.ood_adversarial, None)?.metrics["accuracy"]);
        }
        rows.push(AblationRow {
            k,
            id_dev: cell(&dev_accs),
            ood_decorrelated: cell(&dec_accs),
            ood_adversarial: cell(&adv_accs),
        });
    }
    Ok(AblationTable {
        metric: "accuracy".to_string(),
        seeds: seeds.to_vec(),
        rows,
    })
}
