//! Pair-classification datasets: pre-tokenized integer sequences with labels,
//! per-token group tags and planted-shortcut bookkeeping. Synthetic
//! generation lives in [`generate`]; JSONL persistence in [`jsonl`] is the
//! sole ingestion path for external data.

mod generate;
mod jsonl;

pub use generate::{bias_feature, generate, generate_splits, oracle_label, ExperimentSplits};
pub use jsonl::{read_jsonl, write_jsonl};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved token ids; generated and external data must keep ordinary tokens
/// at `RESERVED_TOKENS` and above.
pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const RESERVED_TOKENS: u32 = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("tokens_b is empty")]
    EmptyTokens,
    #[error("example has label {label} but the dataset declares {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTag {
    Overlapping,
    NonOverlapping,
    Special,
}

/// One pre-tokenized sequence pair. `group_tags` covers the packed layout
/// `[CLS] a [SEP] b [SEP]`, with `Special` on the delimiters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens_a: Vec<u32>,
    pub tokens_b: Vec<u32>,
    pub label: usize,
    pub group_tags: Vec<GroupTag>,
    pub shortcut_aligned: bool,
}

impl Example {
    /// Packed sequence length: `[CLS] a [SEP] b [SEP]`.
    pub fn packed_len(&self) -> usize {
        self.tokens_a.len() + self.tokens_b.len() + 3
    }

    /// Recompute the group tags from the token multisets.
    pub fn recompute_group_tags(&self) -> Vec<GroupTag> {
        compute_group_tags(&self.tokens_a, &self.tokens_b)
    }
}

/// Tags for the packed layout `[CLS] a [SEP] b [SEP]`: a content token is
/// `Overlapping` iff its id occurs on the other side.
pub fn compute_group_tags(tokens_a: &[u32], tokens_b: &[u32]) -> Vec<GroupTag> {
    let in_a = |id: u32| tokens_a.contains(&id);
    let in_b = |id: u32| tokens_b.contains(&id);
    let mut tags = Vec::with_capacity(tokens_a.len() + tokens_b.len() + 3);
    tags.push(GroupTag::Special);
    for &t in tokens_a {
        tags.push(if in_b(t) { GroupTag::Overlapping } else { GroupTag::NonOverlapping });
    }
    tags.push(GroupTag::Special);
    for &t in tokens_b {
        tags.push(if in_a(t) { GroupTag::Overlapping } else { GroupTag::NonOverlapping });
    }
    tags.push(GroupTag::Special);
    tags
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    OverlapShortcut,
    ClaimOnlyShortcut,
}

/// Recipe for one synthetic split. Splits of an experiment differ by seed
/// stream and by `bias_strength` / `adversarial`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_kind: TaskKind,
    pub vocab_size: usize,
    /// Length range (inclusive) of each side of the pair.
    pub n_min: usize,
    pub n_max: usize,
    /// Probability that an example's shortcut feature is forced to agree with
    /// its label; the remainder draw the feature independently.
    pub bias_strength: f64,
    pub num_examples: usize,
    pub label_set: Vec<String>,
    pub seed: u64,
    /// Force the shortcut to disagree with the label everywhere (challenge
    /// split construction). Overrides `bias_strength`.
    #[serde(default)]
    pub adversarial: bool,
    /// Overlap ratio forced above this when the shortcut is "high".
    #[serde(default = "default_tau_hi")]
    pub tau_hi: f64,
    /// Overlap ratio forced below this when the shortcut is "low".
    #[serde(default = "default_tau_lo")]
    pub tau_lo: f64,
}

fn default_tau_hi() -> f64 {
    0.8
}

fn default_tau_lo() -> f64 {
    0.3
}

impl SyntheticTaskSpec {
    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }
}

/// An in-memory dataset: examples plus the declared class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self, DataError> {
        if let Some(e) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                label: e.label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            examples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}
