//! Forward execution. One mounted parameter set serves any number of
//! forward passes on the same tape, so the bias-path and ensemble-path
//! losses of a training step accumulate gradients into the same leaves.

use super::{ForwardMode, ModelConfig, ModelError, ReadModel, LN_EPS};
use crate::data::{Example, CLS_ID, PAD_ID, RESERVED_TOKENS, SEP_ID};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadIdx {
    pooler: ProjIdx,
    classifier: ProjIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    q_main: ProjIdx,
    k_main: ProjIdx,
    q_bias: Option<ProjIdx>,
    k_bias: Option<ProjIdx>,
    value: ProjIdx,
    output: ProjIdx,
    attn_norm: (usize, usize),
    ffn_in: ProjIdx,
    ffn_out: ProjIdx,
    ffn_norm: (usize, usize),
}

/// Positions of every role in the parameter list; built once per model.
#[derive(Debug, Clone)]
pub(crate) struct ModelIdx {
    tok: usize,
    pos: usize,
    seg: usize,
    emb_norm: (usize, usize),
    layers: Vec<LayerIdx>,
    main_head: HeadIdx,
    bias_head: Option<HeadIdx>,
}

impl ModelIdx {
    pub(crate) fn build(
        cfg: &ModelConfig,
        with_bias_branch: bool,
        names: &HashMap<String, usize>,
    ) -> Self {
        let at = |name: &str| *names.get(name).expect("parameter layout covers every role");
        let proj = |prefix: &str| ProjIdx {
            w: at(&format!("{prefix}.weight")),
            b: at(&format!("{prefix}.bias")),
        };
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let ensemble = i < cfg.num_ensemble_layers;
                LayerIdx {
                    q_main: proj(&format!("layer.{i}.attn.query_main")),
                    k_main: proj(&format!("layer.{i}.attn.key_main")),
                    q_bias: (ensemble && with_bias_branch)
                        .then(|| proj(&format!("layer.{i}.attn.query_bias"))),
                    k_bias: (ensemble && with_bias_branch)
                        .then(|| proj(&format!("layer.{i}.attn.key_bias"))),
                    value: proj(&format!("layer.{i}.attn.value")),
                    output: proj(&format!("layer.{i}.attn.output")),
                    attn_norm: (at(&format!("layer.{i}.attn_norm.gain")), at(&format!("layer.{i}.attn_norm.shift"))),
                    ffn_in: proj(&format!("layer.{i}.ffn.in")),
                    ffn_out: proj(&format!("layer.{i}.ffn.out")),
                    ffn_norm: (at(&format!("layer.{i}.ffn_norm.gain")), at(&format!("layer.{i}.ffn_norm.shift"))),
                }
            })
            .collect();
        ModelIdx {
            tok: at("embeddings.token"),
            pos: at("embeddings.position"),
            seg: at("embeddings.segment"),
            emb_norm: (at("embeddings.norm.gain"), at("embeddings.norm.shift")),
            layers,
            main_head: HeadIdx {
                pooler: proj("head.main.pooler"),
                classifier: proj("head.main.classifier"),
            },
            bias_head: with_bias_branch.then(|| HeadIdx {
                pooler: proj("head.bias.pooler"),
                classifier: proj("head.bias.classifier"),
            }),
        }
    }
}

/// A batch packed as `[CLS] a [SEP] b [SEP]` rows, padded to the batch
/// maximum. Logits are independent of the padding because padded keys are
/// masked to exactly zero attention and all row-wise ops ignore other rows.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub key_mask: Vec<bool>,
    /// key_mask replicated over heads and query rows: `[B*h, n, n]` flags
    /// feeding the attention softmax.
    pub(crate) scores_mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EncodedBatch {
    pub fn pack(examples: &[Example], cfg: &ModelConfig) -> Result<Self, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.packed_len()).collect();
        let seq_len = *lengths.iter().max().unwrap();
        if seq_len > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: seq_len,
                max: cfg.max_seq_len,
            });
        }
        let batch_size = examples.len();
        let mut token_ids = Vec::with_capacity(batch_size * seq_len);
        let mut segment_ids = Vec::with_capacity(batch_size * seq_len);
        let mut position_ids = Vec::with_capacity(batch_size * seq_len);
        let mut key_mask = Vec::with_capacity(batch_size * seq_len);
        for e in examples {
            let check = |id: u32| -> Result<usize, ModelError> {
                if id < RESERVED_TOKENS {
                    Err(ModelError::ReservedTokenId { id, reserved: RESERVED_TOKENS })
                } else if id as usize >= cfg.vocab_size {
                    Err(ModelError::InvalidTokenId { id, vocab: cfg.vocab_size })
                } else {
                    Ok(id as usize)
                }
            };
            token_ids.push(CLS_ID as usize);
            segment_ids.push(0);
            for &t in &e.tokens_a {
                token_ids.push(check(t)?);
                segment_ids.push(0);
            }
            token_ids.push(SEP_ID as usize);
            segment_ids.push(0);
            for &t in &e.tokens_b {
                token_ids.push(check(t)?);
                segment_ids.push(1);
            }
            token_ids.push(SEP_ID as usize);
            segment_ids.push(1);
            let len = e.packed_len();
            for _ in len..seq_len {
                token_ids.push(PAD_ID as usize);
                segment_ids.push(0);
            }
            for i in 0..seq_len {
                position_ids.push(i);
                key_mask.push(i < len);
            }
        }
        let scores_mask = expand_scores_mask(&key_mask, batch_size, seq_len, cfg.num_heads);
        Ok(EncodedBatch {
            batch_size,
            seq_len,
            token_ids,
            segment_ids,
            position_ids,
            key_mask,
            scores_mask,
            lengths,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Attention probabilities `[B*h, n, n]` the active path used at the
    /// requested capture layer.
    pub attention: Option<Var>,
}

/// Convex combination of the two attention distributions with the biased
/// side frozen: `a_e = (1-alpha)*a_m + alpha*stop_gradient(a_b)`.
///
/// Computed in residual form `a_m + alpha*(a_b - a_m)`, which is bitwise
/// `a_m` at `alpha = 0` and whenever the two distributions coincide.
pub fn ensemble_attention(
    tape: &mut Tape,
    main_probs: Var,
    biased_probs: Var,
    alpha: f64,
) -> Result<Var, ModelError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(ModelError::AlphaOutOfRange(alpha));
    }
    let frozen = tape.stop_gradient(biased_probs);
    let residual = tape.sub(frozen, main_probs)?;
    let step = tape.scale(residual, alpha);
    Ok(tape.add(main_probs, step)?)
}

/// Per-head scaled dot-product attention probabilities for `hidden`
/// (`batch*n` rows of width d), returned as `[B*h, n, n]`. Masked key
/// positions get exactly zero probability.
#[allow(clippy::too_many_arguments)]
pub fn attention_probs(
    tape: &mut Tape,
    hidden: Var,
    batch: usize,
    n: usize,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    num_heads: usize,
    scores_mask: Option<&[bool]>,
) -> Result<Var, ModelError> {
    let d = *tape.shape(hidden).last().unwrap_or(&0);
    let dh = d / num_heads;
    let q = project_heads(tape, hidden, wq, bq, batch, n, num_heads)?;
    let k = project_heads(tape, hidden, wk, bk, batch, n, num_heads)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    Ok(tape.softmax_rows(scaled, scores_mask)?)
}

/// x2 `[B*n, d]` -> heads `[B*h, n, d/h]` through one projection.
fn project_heads(
    tape: &mut Tape,
    x2: Var,
    w: Var,
    b_: Var,
    batch: usize,
    n: usize,
    h: usize,
) -> Result<Var, ModelError> {
    let proj = tape.matmul(x2, w)?;
    let proj = tape.add_row_broadcast(proj, b_)?;
    Ok(tape.split_heads(proj, batch, n, h)?)
}

/// Replicate a per-position key mask `[B, n]` over heads and query rows.
fn expand_scores_mask(key_mask: &[bool], batch: usize, n: usize, h: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * h * n * n);
    for b in 0..batch {
        let row = &key_mask[b * n..(b + 1) * n];
        for _ in 0..h * n {
            out.extend_from_slice(row);
        }
    }
    out
}

impl ReadModel {
    /// Record one forward pass. `mounted` must come from [`ReadModel::mount`]
    /// on the same tape; several passes may share it, accumulating gradients
    /// into the same leaves. `capture_layer` is 1-based.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        mounted: &[Var],
        batch: &EncodedBatch,
        mode: ForwardMode,
        alpha: f64,
        mut dropout_rng: Option<&mut Rng>,
        capture_layer: Option<usize>,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let (bsz, n) = (batch.batch_size, batch.seq_len);
        let (h, k) = (cfg.num_heads, cfg.num_ensemble_layers);
        let idx = &self.idx;

        let needs_bias = matches!(mode, ForwardMode::BiasPath | ForwardMode::EnsemblePath);
        if needs_bias && !self.has_bias_branch {
            return Err(ModelError::NoBiasBranch);
        }
        let layers_to_run = if mode == ForwardMode::BiasPath { k } else { cfg.num_layers };
        if let Some(layer) = capture_layer {
            if layer == 0 || layer > layers_to_run {
                return Err(ModelError::InvalidCaptureLayer {
                    layer,
                    path: mode,
                    k,
                    l: cfg.num_layers,
                });
            }
        }

        // Embeddings.
        let tok = tape.gather_rows(mounted[idx.tok], &batch.token_ids)?;
        let pos = tape.gather_rows(mounted[idx.pos], &batch.position_ids)?;
        let seg = tape.gather_rows(mounted[idx.seg], &batch.segment_ids)?;
        let sum = tape.add(tok, pos)?;
        let sum = tape.add(sum, seg)?;
        let mut x = tape.layer_normalize(sum, mounted[idx.emb_norm.0], mounted[idx.emb_norm.1], LN_EPS)?;
        x = self.dropout(tape, x, &mut dropout_rng)?;

        let scores_mask = &batch.scores_mask;
        let mut captured = None;

        for li in 0..layers_to_run {
            let layer = &idx.layers[li];

            let main_probs = if mode != ForwardMode::BiasPath {
                Some(attention_probs(
                    tape,
                    x,
                    bsz,
                    n,
                    mounted[layer.q_main.w],
                    mounted[layer.q_main.b],
                    mounted[layer.k_main.w],
                    mounted[layer.k_main.b],
                    h,
                    Some(scores_mask),
                )?)
            } else {
                None
            };
            let bias_probs = if mode == ForwardMode::BiasPath
                || (mode == ForwardMode::EnsemblePath && li < k)
            {
                let (qb, kb) = (layer.q_bias.expect("ensemble layer"), layer.k_bias.expect("ensemble layer"));
                Some(attention_probs(
                    tape,
                    x,
                    bsz,
                    n,
                    mounted[qb.w],
                    mounted[qb.b],
                    mounted[kb.w],
                    mounted[kb.b],
                    h,
                    Some(scores_mask),
                )?)
            } else {
                None
            };
            let probs = match mode {
                ForwardMode::MainPath => main_probs.unwrap(),
                ForwardMode::BiasPath => bias_probs.unwrap(),
                ForwardMode::EnsemblePath => match bias_probs {
                    Some(bp) => ensemble_attention(tape, main_probs.unwrap(), bp, alpha)?,
                    None => main_probs.unwrap(),
                },
            };
            if capture_layer == Some(li + 1) {
                captured = Some(probs);
            }
            let probs = self.dropout(tape, probs, &mut dropout_rng)?;

            // Weighted value aggregation and output projection.
            let v = project_heads(
                tape,
                x,
                mounted[layer.value.w],
                mounted[layer.value.b],
                bsz,
                n,
                h,
            )?;
            let ctx = tape.batch_matmul(probs, v)?;
            let ctx = tape.merge_heads(ctx, bsz, h)?;
            let attn_out = tape.matmul(ctx, mounted[layer.output.w])?;
            let attn_out = tape.add_row_broadcast(attn_out, mounted[layer.output.b])?;
            let attn_out = self.dropout(tape, attn_out, &mut dropout_rng)?;
            let res = tape.add(x, attn_out)?;
            x = tape.layer_normalize(res, mounted[layer.attn_norm.0], mounted[layer.attn_norm.1], LN_EPS)?;

            let hid = tape.matmul(x, mounted[layer.ffn_in.w])?;
            let hid = tape.add_row_broadcast(hid, mounted[layer.ffn_in.b])?;
            let hid = tape.gelu(hid);
            let ffn_out = tape.matmul(hid, mounted[layer.ffn_out.w])?;
            let ffn_out = tape.add_row_broadcast(ffn_out, mounted[layer.ffn_out.b])?;
            let ffn_out = self.dropout(tape, ffn_out, &mut dropout_rng)?;
            let res = tape.add(x, ffn_out)?;
            x = tape.layer_normalize(res, mounted[layer.ffn_norm.0], mounted[layer.ffn_norm.1], LN_EPS)?;
        }

        // First-token readout through the path's head.
        let head = match mode {
            ForwardMode::BiasPath => idx.bias_head.as_ref().expect("bias branch present"),
            _ => &idx.main_head,
        };
        let cls_rows: Vec<usize> = (0..bsz).map(|bi| bi * n).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let pooled = tape.matmul(cls, mounted[head.pooler.w])?;
        let pooled = tape.add_row_broadcast(pooled, mounted[head.pooler.b])?;
        let pooled = tape.tanh(pooled);
        let logits = tape.matmul(pooled, mounted[head.classifier.w])?;
        let logits = tape.add_row_broadcast(logits, mounted[head.classifier.b])?;

        Ok(ForwardOutput {
            logits,
            attention: captured,
        })
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        rng: &mut Option<&mut Rng>,
    ) -> Result<Var, ModelError> {
        let rate = self.config.dropout;
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = 1.0 - rate;
        let shape = tape.shape(x).to_vec();
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(shape, mask)?;
        Ok(tape.mul(x, mask)?)
    }

    /// One forward pass on a fresh tape; logits as a standalone tensor.
    pub fn run_forward(&self, batch: &EncodedBatch, mode: ForwardMode) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let mounted = self.mount(&mut tape);
        let out = self.forward_on_tape(&mut tape, &mounted, batch, mode, self.config.alpha, None, None)?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Forward pass capturing the attention the path used at `layer`
    /// (1-based). Returns (logits, attention `[B, h, n, n]`).
    pub fn run_forward_with_attention(
        &self,
        batch: &EncodedBatch,
        mode: ForwardMode,
        layer: usize,
    ) -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::new();
        let mounted = self.mount(&mut tape);
        let out = self.forward_on_tape(
            &mut tape,
            &mounted,
            batch,
            mode,
            self.config.alpha,
            None,
            Some(layer),
        )?;
        let attn = out.attention.expect("capture layer validated");
        let logits = tape.to_tensor(out.logits);
        let mut attn_t = tape.to_tensor(attn);
        attn_t = Tensor::new(
            vec![batch.batch_size, self.config.num_heads, batch.seq_len, batch.seq_len],
            attn_t.values().to_vec(),
        )
        .expect("same element count");
        Ok((logits, attn_t))
    }
}
