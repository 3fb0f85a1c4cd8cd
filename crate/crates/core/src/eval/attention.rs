//! First-token attention audit: how much probability mass the aggregation
//! token places on overlapping, non-overlapping and special tokens, per
//! layer and path, overall and per gold label.

use super::EvalError;
use crate::data::{Dataset, GroupTag};
use crate::model::{EncodedBatch, ForwardMode, ReadModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const AUDIT_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub overlapping: f64,
    pub non_overlapping: f64,
    pub special: f64,
}

impl GroupMeans {
    /// The audited quantity: attention to non-overlapping minus attention to
    /// overlapping tokens. Negative means the model leans on overlap.
    pub fn gap(&self) -> f64 {
        self.non_overlapping - self.overlapping
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// 1-based layer the audit read.
    pub layer: usize,
    pub path: ForwardMode,
    pub overall: GroupMeans,
    /// Per gold-label breakdown.
    pub by_label: BTreeMap<usize, GroupMeans>,
    pub num_examples: usize,
    /// Per-head group means, present when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_head: Option<Vec<GroupMeans>>,
}

#[derive(Default, Clone, Copy)]
struct Accumulator {
    sums: [f64; 3],
    counts: [usize; 3],
}

impl Accumulator {
    fn add_example(&mut self, per_group_mean: [Option<f64>; 3]) {
        for (g, mean) in per_group_mean.iter().enumerate() {
            if let Some(m) = mean {
                self.sums[g] += m;
                self.counts[g] += 1;
            }
        }
    }

    fn means(&self) -> GroupMeans {
        let at = |g: usize| {
            if self.counts[g] > 0 {
                self.sums[g] / self.counts[g] as f64
            } else {
                0.0
            }
        };
        GroupMeans {
            overlapping: at(0),
            non_overlapping: at(1),
            special: at(2),
        }
    }
}

fn group_index(tag: GroupTag) -> usize {
    match tag {
        GroupTag::Overlapping => 0,
        GroupTag::NonOverlapping => 1,
        GroupTag::Special => 2,
    }
}

/// Audit the first-token attention row at `layer` (1-based) on `path`,
/// head-averaged, grouped by token tag. Means are per-token probabilities
/// averaged over examples; examples lacking a group are skipped for that
/// group only.
pub fn attention_stats(
    model: &ReadModel,
    dataset: &Dataset,
    layer: usize,
    path: ForwardMode,
) -> Result<AttentionStats, EvalError> {
    attention_stats_detailed(model, dataset, layer, path, false)
}

/// [`attention_stats`] with optional per-head means.
pub fn attention_stats_detailed(
    model: &ReadModel,
    dataset: &Dataset,
    layer: usize,
    path: ForwardMode,
    per_head: bool,
) -> Result<AttentionStats, EvalError> {
    let k = model.config.num_ensemble_layers;
    let l = model.config.num_layers;
    let max_layer = match path {
        ForwardMode::MainPath => l,
        // The dual distributions only exist in the ensemble block.
        ForwardMode::BiasPath | ForwardMode::EnsemblePath => k,
    };
    if layer == 0 || layer > max_layer {
        return Err(EvalError::InvalidLayerPath { layer, path, k, l });
    }
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }

    let h = model.config.num_heads;
    let mut overall = Accumulator::default();
    let mut by_label: BTreeMap<usize, Accumulator> = BTreeMap::new();
    let mut head_acc: Vec<Accumulator> = vec![Accumulator::default(); h];
    let mut tape = crate::tensor::Tape::new();

    for chunk in dataset.examples.chunks(AUDIT_BATCH) {
        tape.reset();
        let batch = EncodedBatch::pack(chunk, &model.config)?;
        let mounted = model.mount(&mut tape);
        let out = model.forward_on_tape(
            &mut tape,
            &mounted,
            &batch,
            path,
            model.config.alpha,
            None,
            Some(layer),
        )?;
        let attn = tape.value(out.attention.expect("capture layer validated"));
        let n = batch.seq_len;

        for (bi, example) in chunk.iter().enumerate() {
            let len = batch.lengths[bi];
            // Head-averaged first-token row over the real positions.
            let mut sums = [0.0f64; 3];
            let mut counts = [0usize; 3];
            let mut head_sums = vec![[0.0f64; 3]; if per_head { h } else { 0 }];
            for pos in 0..len {
                let mut mass = 0.0;
                for head in 0..h {
                    let v = attn[((bi * h + head) * n) * n + pos];
                    mass += v;
                    if per_head {
                        head_sums[head][group_index(example.group_tags[pos])] += v;
                    }
                }
                mass /= h as f64;
                let g = group_index(example.group_tags[pos]);
                sums[g] += mass;
                counts[g] += 1;
            }
            debug_assert!(
                (sums.iter().sum::<f64>() - 1.0).abs() < 1e-9,
                "first-token attention mass must total one"
            );
            let per_group = [0, 1, 2].map(|g| (counts[g] > 0).then(|| sums[g] / counts[g] as f64));
            overall.add_example(per_group);
            by_label.entry(example.label).or_default().add_example(per_group);
            for (head, hs) in head_sums.iter().enumerate() {
                head_acc[head].add_example(
                    [0, 1, 2].map(|g| (counts[g] > 0).then(|| hs[g] / counts[g] as f64)),
                );
            }
        }
    }

    Ok(AttentionStats {
        layer,
        path,
        overall: overall.means(),
        by_label: by_label.into_iter().map(|(label, acc)| (label, acc.means())).collect(),
        num_examples: dataset.len(),
        per_head: per_head.then(|| head_acc.iter().map(|a| a.means()).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_group_tags, Example};
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_ensemble_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 30,
            max_seq_len: 16,
            num_classes: 2,
            alpha: 0.1,
            dropout: 0.0,
        }
    }

    fn dataset() -> Dataset {
        let mk = |a: Vec<u32>, b: Vec<u32>, label: usize| Example {
            group_tags: compute_group_tags(&a, &b),
            tokens_a: a,
            tokens_b: b,
            label,
            shortcut_aligned: false,
        };
        Dataset::new(
            vec![
                mk(vec![5, 6, 7], vec![7, 8], 0),
                mk(vec![9, 10], vec![11, 12, 13], 1),
                mk(vec![14, 15], vec![15, 16], 0),
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_rows_match_hand_arithmetic() {
        // Uniform attention over six tokens, two per group: each mean 1/6.
        let mut acc = Accumulator::default();
        let row = [1.0 / 6.0; 6];
        let tags = [
            GroupTag::Overlapping,
            GroupTag::Overlapping,
            GroupTag::NonOverlapping,
            GroupTag::NonOverlapping,
            GroupTag::Special,
            GroupTag::Special,
        ];
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for (mass, tag) in row.iter().zip(tags) {
            sums[group_index(tag)] += mass;
            counts[group_index(tag)] += 1;
        }
        acc.add_example([0, 1, 2].map(|g| Some(sums[g] / counts[g] as f64)));
        let m = acc.means();
        assert!((m.overlapping - 1.0 / 6.0).abs() < 1e-12);
        assert!((m.non_overlapping - 1.0 / 6.0).abs() < 1e-12);
        assert!((m.special - 1.0 / 6.0).abs() < 1e-12);

        // Mass 0.5 on one non-overlapping token, 0.1 on the other five:
        // the non-overlapping mean is (0.5 + 0.1) / 2 = 0.3.
        let row = [0.1, 0.1, 0.5, 0.1, 0.1, 0.1];
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for (mass, tag) in row.iter().zip(tags) {
            sums[group_index(tag)] += mass;
            counts[group_index(tag)] += 1;
        }
        assert!((sums[1] / counts[1] as f64 - 0.3).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // the explicit loops are the point
    fn stats_agree_with_independent_naive_pass() {
        let cfg = tiny_config();
        let model = ReadModel::new(cfg.clone(), 83).unwrap();
        let ds = dataset();
        let stats = attention_stats(&model, &ds, 1, ForwardMode::MainPath).unwrap();

        // Naive pass: one example at a time, explicit loops per token group.
        let mut per_group: [Vec<f64>; 3] = [vec![], vec![], vec![]];
        for ex in &ds.examples {
            let solo = Dataset::new(vec![ex.clone()], 2).unwrap();
            let batch = EncodedBatch::pack(&solo.examples, &cfg).unwrap();
            let (_, attn) = model
                .run_forward_with_attention(&batch, ForwardMode::MainPath, 1)
                .unwrap();
            let n = batch.seq_len;
            let h = cfg.num_heads;
            for g in 0..3 {
                let mut total = 0.0;
                let mut count = 0usize;
                for pos in 0..ex.packed_len() {
                    if group_index(ex.group_tags[pos]) == g {
                        let mut mass = 0.0;
                        for head in 0..h {
                            mass += attn.values()[(head * n) * n + pos];
                        }
                        total += mass / h as f64;
                        count += 1;
                    }
                }
                if count > 0 {
                    per_group[g].push(total / count as f64);
                }
            }
        }
        let naive = |g: usize| per_group[g].iter().sum::<f64>() / per_group[g].len() as f64;
        assert!((stats.overall.overlapping - naive(0)).abs() < 1e-12);
        assert!((stats.overall.non_overlapping - naive(1)).abs() < 1e-12);
        assert!((stats.overall.special - naive(2)).abs() < 1e-12);
    }

    #[test]
    fn per_label_breakdown_covers_all_labels() {
        let model = ReadModel::new(tiny_config(), 83).unwrap();
        let stats = attention_stats(&model, &dataset(), 1, ForwardMode::EnsemblePath).unwrap();
        assert_eq!(stats.by_label.len(), 2);
        assert_eq!(stats.num_examples, 3);
    }

    #[test]
    fn per_head_means_average_to_the_overall_means() {
        let model = ReadModel::new(tiny_config(), 83).unwrap();
        let ds = dataset();
        let stats = super::attention_stats_detailed(&model, &ds, 1, ForwardMode::MainPath, true).unwrap();
        let heads = stats.per_head.as_ref().unwrap();
        assert_eq!(heads.len(), model.config.num_heads);
        let avg_overlap: f64 =
            heads.iter().map(|g| g.overlapping).sum::<f64>() / heads.len() as f64;
        assert!((avg_overlap - stats.overall.overlapping).abs() < 1e-12);
        let plain = attention_stats(&model, &ds, 1, ForwardMode::MainPath).unwrap();
        assert!(plain.per_head.is_none());
        assert_eq!(plain.overall, stats.overall);
    }

    #[test]
    fn invalid_layer_path_combinations_error() {
        let model = ReadModel::new(tiny_config(), 83).unwrap();
        let ds = dataset();
        // k = 1: the dual paths exist only at layer 1.
        assert!(attention_stats(&model, &ds, 2, ForwardMode::BiasPath).is_err());
        assert!(attention_stats(&model, &ds, 2, ForwardMode::EnsemblePath).is_err());
        assert!(attention_stats(&model, &ds, 0, ForwardMode::MainPath).is_err());
        assert!(attention_stats(&model, &ds, 3, ForwardMode::MainPath).is_err());
        assert!(attention_stats(&model, &ds, 2, ForwardMode::MainPath).is_ok());
    }
}
