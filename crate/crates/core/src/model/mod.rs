//! The dual-path transformer encoder: bottom "ensemble" layers carry a main
//! and a biased attention distribution over shared values, upper layers are
//! main-only, and two classification heads read the first-token state — the
//! biased head at the top ensemble layer, the main head at the top of the
//! stack.
//!
//! Parameters are partitioned exactly: the biased query/key projections and
//! the biased head belong to the biased model alone; main query/key
//! projections, the upper layers and the main head belong to the main model
//! alone; everything else (embeddings, values, output projections, FFNs,
//! normalization in the ensemble layers) is physically shared.

mod encoder;

pub use encoder::{attention_probs, ensemble_attention, EncodedBatch, ForwardOutput};

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub(crate) const LN_EPS: f64 = 1e-12;
const EMBED_INIT_STD: f64 = 0.02;
const MODEL_INIT_STREAM: u64 = 0x0de1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("num_ensemble_layers must satisfy 1 <= k <= num_layers, got k={k}, L={l}")]
    EnsembleLayersOutOfRange { k: usize, l: usize },
    #[error("num_heads {h} must divide model_dim {d}")]
    HeadsMustDivideDim { h: usize, d: usize },
    #[error("alpha must lie strictly inside (0, 1), got {0}")]
    AlphaNotInOpenUnit(f64),
    #[error("dropout must lie in [0, 1), got {0}")]
    DropoutOutOfRange(f64),
    #[error("{field} must be positive")]
    ZeroField { field: &'static str },
    #[error("vocab_size {vocab} must exceed the {reserved} reserved token ids")]
    VocabTooSmall { vocab: usize, reserved: usize },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    InvalidTokenId { id: u32, vocab: usize },
    #[error("token id {id} collides with the reserved ids below {reserved}")]
    ReservedTokenId { id: u32, reserved: u32 },
    #[error("packed sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("cannot capture {path:?} attention at layer {layer} (k={k}, L={l})")]
    InvalidCaptureLayer { layer: usize, path: ForwardMode, k: usize, l: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("model has no biased branch")]
    NoBiasBranch,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_ensemble_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 6,
            num_ensemble_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 200,
            max_seq_len: 64,
            num_classes: 2,
            alpha: 0.1,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroField { field });
            }
        }
        if self.num_ensemble_layers == 0 || self.num_ensemble_layers > self.num_layers {
            return Err(ConfigError::EnsembleLayersOutOfRange {
                k: self.num_ensemble_layers,
                l: self.num_layers,
            });
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ConfigError::HeadsMustDivideDim {
                h: self.num_heads,
                d: self.model_dim,
            });
        }
        // The open-interval rule: boundary alphas are test fixtures only.
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::AlphaNotInOpenUnit(self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::DropoutOutOfRange(self.dropout));
        }
        let reserved = crate::data::RESERVED_TOKENS as usize;
        if self.vocab_size <= reserved {
            return Err(ConfigError::VocabTooSmall {
                vocab: self.vocab_size,
                reserved,
            });
        }
        Ok(())
    }
}

/// Which attention distribution drives a forward pass. Exactly one is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    BiasPath,
    EnsemblePath,
    MainPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamPartition {
    Shared,
    MainOnly,
    BiasOnly,
}

enum Init {
    /// Fan-scaled normal for projection matrices; training from scratch
    /// needs the signal this carries through the stack, where the flat
    /// pretraining-era 0.02 leaves logits example-independent for thousands
    /// of steps at this depth.
    Xavier,
    /// Embedding tables; normalization right after makes the scale benign.
    Embedding,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    partition: ParamPartition,
    init: Init,
}

/// The single source of truth for parameter names, shapes and partitions.
fn param_layout(cfg: &ModelConfig, with_bias_branch: bool) -> Vec<ParamSpec> {
    use Init::*;
    use ParamPartition::*;
    let d = cfg.model_dim;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, partition: ParamPartition, init: Init| {
        specs.push(ParamSpec { name, shape, partition, init });
    };

    push("embeddings.token".into(), vec![cfg.vocab_size, d], Shared, Embedding);
    push("embeddings.position".into(), vec![cfg.max_seq_len, d], Shared, Embedding);
    push("embeddings.segment".into(), vec![2, d], Shared, Embedding);
    push("embeddings.norm.gain".into(), vec![d], Shared, Ones);
    push("embeddings.norm.shift".into(), vec![d], Shared, Zeros);

    for layer in 0..cfg.num_layers {
        let ensemble = layer < cfg.num_ensemble_layers;
        // Weights above the ensemble block belong to the main model alone.
        let shared_or_main = if ensemble { Shared } else { MainOnly };
        let p = |suffix: &str| format!("layer.{layer}.{suffix}");
        push(p("attn.query_main.weight"), vec![d, d], MainOnly, Xavier);
        push(p("attn.query_main.bias"), vec![d], MainOnly, Zeros);
        push(p("attn.key_main.weight"), vec![d, d], MainOnly, Xavier);
        push(p("attn.key_main.bias"), vec![d], MainOnly, Zeros);
        if ensemble && with_bias_branch {
            push(p("attn.query_bias.weight"), vec![d, d], BiasOnly, Xavier);
            push(p("attn.query_bias.bias"), vec![d], BiasOnly, Zeros);
            push(p("attn.key_bias.weight"), vec![d, d], BiasOnly, Xavier);
            push(p("attn.key_bias.bias"), vec![d], BiasOnly, Zeros);
        }
        push(p("attn.value.weight"), vec![d, d], shared_or_main, Xavier);
        push(p("attn.value.bias"), vec![d], shared_or_main, Zeros);
        push(p("attn.output.weight"), vec![d, d], shared_or_main, Xavier);
        push(p("attn.output.bias"), vec![d], shared_or_main, Zeros);
        push(p("attn_norm.gain"), vec![d], shared_or_main, Ones);
        push(p("attn_norm.shift"), vec![d], shared_or_main, Zeros);
        push(p("ffn.in.weight"), vec![d, cfg.ffn_dim], shared_or_main, Xavier);
        push(p("ffn.in.bias"), vec![cfg.ffn_dim], shared_or_main, Zeros);
        push(p("ffn.out.weight"), vec![cfg.ffn_dim, d], shared_or_main, Xavier);
        push(p("ffn.out.bias"), vec![d], shared_or_main, Zeros);
        push(p("ffn_norm.gain"), vec![d], shared_or_main, Ones);
        push(p("ffn_norm.shift"), vec![d], shared_or_main, Zeros);
    }

    push("head.main.pooler.weight".into(), vec![d, d], MainOnly, Xavier);
    push("head.main.pooler.bias".into(), vec![d], MainOnly, Zeros);
    push("head.main.classifier.weight".into(), vec![d, cfg.num_classes], MainOnly, Xavier);
    push("head.main.classifier.bias".into(), vec![cfg.num_classes], MainOnly, Zeros);
    if with_bias_branch {
        push("head.bias.pooler.weight".into(), vec![d, d], BiasOnly, Xavier);
        push("head.bias.pooler.bias".into(), vec![d], BiasOnly, Zeros);
        push("head.bias.classifier.weight".into(), vec![d, cfg.num_classes], BiasOnly, Xavier);
        push("head.bias.classifier.bias".into(), vec![cfg.num_classes], BiasOnly, Zeros);
    }
    specs
}

/// Exact parameter counts per partition for the dual-path architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCounts {
    pub shared: usize,
    pub main_only: usize,
    pub bias_only: usize,
    pub total: usize,
    pub bias_only_fraction: f64,
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamCounts {
    let mut counts = ParamCounts {
        shared: 0,
        main_only: 0,
        bias_only: 0,
        total: 0,
        bias_only_fraction: 0.0,
    };
    for spec in param_layout(cfg, true) {
        let n: usize = spec.shape.iter().product();
        counts.total += n;
        match spec.partition {
            ParamPartition::Shared => counts.shared += n,
            ParamPartition::MainOnly => counts.main_only += n,
            ParamPartition::BiasOnly => counts.bias_only += n,
        }
    }
    counts.bias_only_fraction = counts.bias_only as f64 / counts.total as f64;
    counts
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub partition: ParamPartition,
}

/// The model: a named, partitioned parameter collection plus its config.
/// Forward execution lives in [`encoder`].
#[derive(Debug, Clone)]
pub struct ReadModel {
    pub config: ModelConfig,
    pub(crate) params: Vec<Param>,
    name_index: HashMap<String, usize>,
    pub has_bias_branch: bool,
    pub(crate) idx: encoder::ModelIdx,
}

impl ReadModel {
    /// Initialize a dual-path model from a seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(config, seed, true)
    }

    /// Single-path baseline: one attention per layer, one head, no biased
    /// parameters. Same code path everywhere else.
    pub fn new_vanilla(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(config, seed, false)
    }

    fn build(config: ModelConfig, seed: u64, with_bias_branch: bool) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::derive(seed, MODEL_INIT_STREAM);
        let params: Vec<Param> = param_layout(&config, with_bias_branch)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let values = match spec.init {
                    Init::Xavier => {
                        let fan_in = spec.shape[0] as f64;
                        let fan_out = spec.shape[spec.shape.len() - 1] as f64;
                        let std = (2.0 / (fan_in + fan_out)).sqrt();
                        (0..n).map(|_| rng.normal() * std).collect()
                    }
                    Init::Embedding => (0..n).map(|_| rng.normal() * EMBED_INIT_STD).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Param {
                    tensor: Tensor::new(spec.shape, values).unwrap().with_grad(),
                    name: spec.name,
                    partition: spec.partition,
                }
            })
            .collect();
        Self::from_params(config, params, with_bias_branch)
    }

    /// Assemble a model from externally provided parameters (checkpoint
    /// loading). Names, shapes and order must match the layout exactly.
    pub(crate) fn from_params(
        config: ModelConfig,
        params: Vec<Param>,
        with_bias_branch: bool,
    ) -> Result<Self, ModelError> {
        let name_index: HashMap<String, usize> = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let idx = encoder::ModelIdx::build(&config, with_bias_branch, &name_index);
        Ok(ReadModel {
            config,
            params,
            name_index,
            has_bias_branch: with_bias_branch,
            idx,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.name_index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.name_index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    /// Expected layout (name, shape, partition) for this model's config.
    pub fn expected_layout(config: &ModelConfig, with_bias_branch: bool) -> Vec<(String, Vec<usize>, ParamPartition)> {
        param_layout(config, with_bias_branch)
            .into_iter()
            .map(|s| (s.name, s.shape, s.partition))
            .collect()
    }

    /// Copy the main query/key projections over the biased ones; afterwards
    /// all three paths compute identical attention. Test fixture.
    pub fn copy_main_qk_into_bias(&mut self) -> Result<(), ModelError> {
        if !self.has_bias_branch {
            return Err(ModelError::NoBiasBranch);
        }
        for layer in 0..self.config.num_ensemble_layers {
            for (main, bias) in [
                (format!("layer.{layer}.attn.query_main.weight"), format!("layer.{layer}.attn.query_bias.weight")),
                (format!("layer.{layer}.attn.query_main.bias"), format!("layer.{layer}.attn.query_bias.bias")),
                (format!("layer.{layer}.attn.key_main.weight"), format!("layer.{layer}.attn.key_bias.weight")),
                (format!("layer.{layer}.attn.key_main.bias"), format!("layer.{layer}.attn.key_bias.bias")),
            ] {
                let src = self.param(&main).expect("layout name").clone();
                let dst = self.param_mut(&bias).expect("layout name");
                dst.values_mut().copy_from_slice(src.values());
            }
        }
        Ok(())
    }

    /// Register every parameter on a tape, in layout order, for use with
    /// [`ReadModel::forward_on_tape`]. Gradients harvested after a backward
    /// sweep line up with [`ReadModel::params`].
    pub fn mount(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }
}
