//! Deterministic generators for pair-classification tasks with planted
//! shortcuts.
//!
//! Content rule: `tokens_a` names a key pair (one relation-pool token `r`,
//! one entity-pool token `e`); the pair entails iff `r` occurs before `e`
//! somewhere in `tokens_b`. The rule is order-sensitive, so it is invisible
//! to bag-of-tokens features.
//!
//! Planted shortcut: for `OverlapShortcut`, the lexical overlap ratio
//! `|set(a) ∩ set(b)| / |set(b)|` is pushed above `tau_hi` or below `tau_lo`;
//! for `ClaimOnlyShortcut`, a cue token is planted in (or kept out of)
//! `tokens_b`. With probability `bias_strength` the shortcut level is forced
//! to agree with the label; otherwise it is drawn independently. Adversarial
//! splits force disagreement everywhere, the way challenge sets do.

use super::{
    compute_group_tags, DataError, Dataset, Example, SyntheticTaskSpec, TaskKind, RESERVED_TOKENS,
};
use crate::rng::{stream_seed, Rng};

pub(crate) const LABEL_ENTAIL: usize = 0;
const LABEL_NEUTRAL: usize = 1; // three-class only

#[derive(Debug, Clone, Copy)]
pub(crate) struct TokenPools {
    pub relations: (u32, u32),
    pub entities: (u32, u32),
    pub fillers: (u32, u32),
    /// Claim-only cue; carved out of the filler pool.
    pub cue: u32,
}

pub(crate) fn token_pools(vocab_size: usize) -> TokenPools {
    let v = vocab_size as u32;
    let n_rel = (v / 12).clamp(2, 24);
    let n_ent = (v / 6).clamp(2, 48);
    let rel_start = RESERVED_TOKENS;
    let ent_start = rel_start + n_rel;
    let fill_start = ent_start + n_ent;
    TokenPools {
        relations: (rel_start, ent_start),
        entities: (ent_start, fill_start),
        // First filler is the claim-only cue; ordinary fillers follow it.
        fillers: (fill_start + 1, v),
        cue: fill_start,
    }
}

fn pool_size(p: (u32, u32)) -> usize {
    (p.1 - p.0) as usize
}

fn in_pool(id: u32, p: (u32, u32)) -> bool {
    id >= p.0 && id < p.1
}

fn validate(spec: &SyntheticTaskSpec) -> Result<TokenPools, DataError> {
    if !(2..=3).contains(&spec.label_set.len()) {
        return Err(DataError::Spec(format!(
            "label_set must name 2 or 3 classes, got {}",
            spec.label_set.len()
        )));
    }
    if !(0.0..=1.0).contains(&spec.bias_strength) {
        return Err(DataError::Spec(format!(
            "bias_strength must lie in [0, 1], got {}",
            spec.bias_strength
        )));
    }
    if spec.n_min < 3 || spec.n_min > spec.n_max {
        return Err(DataError::Spec(format!(
            "need 3 <= n_min <= n_max, got [{}, {}]",
            spec.n_min, spec.n_max
        )));
    }
    if !(0.0 < spec.tau_lo && spec.tau_lo < spec.tau_hi && spec.tau_hi < 1.0) {
        return Err(DataError::Spec(format!(
            "need 0 < tau_lo < tau_hi < 1, got tau_lo={}, tau_hi={}",
            spec.tau_lo, spec.tau_hi
        )));
    }
    // Low-overlap side: b carries the two key tokens plus fresh fillers, so
    // the best reachable ratio is 2 / n_min.
    if 2.0 / spec.n_min as f64 > spec.tau_lo {
        return Err(DataError::Spec(format!(
            "tau_lo {} unreachable: shortest pairs (n_min {}) cannot get below it",
            spec.tau_lo, spec.n_min
        )));
    }
    let pools = token_pools(spec.vocab_size);
    if spec.vocab_size <= (RESERVED_TOKENS as usize) + pool_size(pools.relations) + pool_size(pools.entities)
    {
        return Err(DataError::Spec(format!(
            "vocab_size {} leaves no filler tokens",
            spec.vocab_size
        )));
    }
    // Worst case needs distinct fillers for a and fresh fillers for b.
    let needed = 2 * spec.n_max;
    if pool_size(pools.fillers) < needed {
        return Err(DataError::Spec(format!(
            "vocab_size {} too small: {} filler tokens available, {} needed for n_max {}",
            spec.vocab_size,
            pool_size(pools.fillers),
            needed,
            spec.n_max
        )));
    }
    Ok(pools)
}

/// Draw `count` distinct ids from `pool`, none of which appear in `exclude`.
fn sample_distinct(rng: &mut Rng, pool: (u32, u32), count: usize, exclude: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(count);
    while out.len() < count {
        let id = pool.0 + rng.below(pool_size(pool)) as u32;
        if !exclude.contains(&id) && !out.contains(&id) {
            out.push(id);
        }
    }
    out
}

/// Fresh material for tokens_b: mostly fillers, with some relation/entity
/// distractors, all distinct and absent from `exclude`.
fn sample_fresh(rng: &mut Rng, pools: &TokenPools, count: usize, exclude: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(count);
    let mut taken: Vec<u32> = exclude.to_vec();
    for _ in 0..count {
        let pool = match rng.below(10) {
            0..=1 => pools.relations,
            2..=3 => pools.entities,
            _ => pools.fillers,
        };
        let id = sample_distinct(rng, pool, 1, &taken)[0];
        taken.push(id);
        out.push(id);
    }
    out
}

/// Place `first` somewhere before `second` (or the reverse) in `tokens`.
fn enforce_order(tokens: &mut [u32], first: u32, second: u32) {
    let pf = tokens.iter().position(|&t| t == first).expect("key token present");
    let ps = tokens.iter().position(|&t| t == second).expect("key token present");
    if pf > ps {
        tokens.swap(pf, ps);
    }
}

struct ExampleDraw {
    label: usize,
    aligned: bool,
    shortcut_high: bool,
}

fn draw_label_and_shortcut(rng: &mut Rng, spec: &SyntheticTaskSpec) -> ExampleDraw {
    let label = rng.below(spec.label_set.len());
    let label_is_entail = label == LABEL_ENTAIL;
    if spec.adversarial {
        return ExampleDraw {
            label,
            aligned: false,
            shortcut_high: !label_is_entail,
        };
    }
    let aligned = rng.bernoulli(spec.bias_strength);
    let shortcut_high = if aligned { label_is_entail } else { rng.bernoulli(0.5) };
    ExampleDraw {
        label,
        aligned,
        shortcut_high,
    }
}

fn generate_example(spec: &SyntheticTaskSpec, pools: &TokenPools, rng: &mut Rng) -> Example {
    let draw = draw_label_and_shortcut(rng, spec);
    let three_class = spec.label_set.len() == 3;

    // Lengths are drawn identically for every label and shortcut level, so
    // length itself carries no signal. tokens_a is at least as long as
    // tokens_b, which keeps the high-overlap construction feasible.
    let len_b = rng.range_inclusive(spec.n_min, spec.n_max);
    let len_a = rng.range_inclusive(len_b, spec.n_max);

    // tokens_a names the key pair positionally: it carries one to two
    // relation-pool and entity-pool tokens each, and the pair is the first
    // of each kind after shuffling. The extra candidates keep the content
    // rule from collapsing into pool membership alone.
    let mut rel_count = 1 + rng.below(2);
    let mut ent_count = 1 + rng.below(2);
    while rel_count + ent_count > len_a {
        if rel_count > 1 {
            rel_count -= 1;
        } else {
            ent_count -= 1;
        }
    }
    let mut tokens_a = sample_distinct(rng, pools.relations, rel_count, &[]);
    tokens_a.extend(sample_distinct(rng, pools.entities, ent_count, &tokens_a));
    let fillers_a = sample_distinct(rng, pools.fillers, len_a - tokens_a.len(), &tokens_a);
    tokens_a.extend(fillers_a);
    rng.shuffle(&mut tokens_a);
    let r = *tokens_a.iter().find(|&&t| in_pool(t, pools.relations)).expect("relation present");
    let e = *tokens_a.iter().find(|&&t| in_pool(t, pools.entities)).expect("entity present");

    // tokens_b: both key tokens plus filler material chosen to hit the
    // shortcut level; the label is carried purely by key-token order. Fresh
    // tokens mix in key-pool distractors so matching must be exact.
    let overlap_matters = spec.task_kind == TaskKind::OverlapShortcut;
    let high = overlap_matters && draw.shortcut_high;
    let mut tokens_b = if high {
        let fresh_count = ((len_b as f64) * (1.0 - spec.tau_hi) / 2.0).floor() as usize;
        let from_a_count = len_b - fresh_count;
        // tokens_a is already shuffled, so taking its leading non-key tokens
        // is an unbiased draw (and carries a's distractor keys with it).
        let others = tokens_a.iter().copied().filter(|&t| t != r && t != e);
        let mut b = vec![r, e];
        b.extend(others.take(from_a_count - 2));
        let fresh = sample_fresh(rng, pools, fresh_count, &tokens_a);
        b.extend(fresh);
        b
    } else {
        let mut b = vec![r, e];
        let fresh = sample_fresh(rng, pools, len_b - 2, &tokens_a);
        b.extend(fresh);
        b
    };
    rng.shuffle(&mut tokens_b);

    // Key-token order encodes the relation.
    match (three_class, draw.label) {
        (_, LABEL_ENTAIL) => enforce_order(&mut tokens_b, r, e),
        (true, LABEL_NEUTRAL) => {
            // Neutral drops the entity token.
            let pe = tokens_b.iter().position(|&t| t == e).expect("entity present");
            let mut exclude = tokens_a.clone();
            exclude.extend_from_slice(&tokens_b);
            tokens_b[pe] = sample_distinct(rng, pools.fillers, 1, &exclude)[0];
        }
        _ => enforce_order(&mut tokens_b, e, r),
    }

    // Claim-only cue: presence is the shortcut feature.
    if spec.task_kind == TaskKind::ClaimOnlyShortcut && draw.shortcut_high {
        let slots: Vec<usize> = tokens_b
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != r && t != e)
            .map(|(i, _)| i)
            .collect();
        let slot = slots[rng.below(slots.len())];
        tokens_b[slot] = pools.cue;
    }

    let group_tags = compute_group_tags(&tokens_a, &tokens_b);
    Example {
        tokens_a,
        tokens_b,
        label: draw.label,
        group_tags,
        shortcut_aligned: draw.aligned,
    }
}

/// Generate a dataset. A pure function of the spec: the same spec always
/// yields the same examples, and each example comes from its own derived
/// stream, so shards can be produced independently and concatenated.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Dataset, DataError> {
    let pools = validate(spec)?;
    let examples = (0..spec.num_examples)
        .map(|i| {
            let mut rng = Rng::new(stream_seed(spec.seed, 1 + i as u64));
            generate_example(spec, &pools, &mut rng)
        })
        .collect();
    Dataset::new(examples, spec.label_set.len())
}

/// Recompute the label from the content rule alone, ignoring every shortcut
/// feature. The key pair is read off `tokens_a`: the first relation-pool
/// token and the first entity-pool token.
pub fn oracle_label(example: &Example, spec: &SyntheticTaskSpec) -> usize {
    let pools = token_pools(spec.vocab_size);
    let r = example.tokens_a.iter().copied().find(|&t| in_pool(t, pools.relations));
    let e = example.tokens_a.iter().copied().find(|&t| in_pool(t, pools.entities));
    let (r, e) = match (r, e) {
        (Some(r), Some(e)) => (r, e),
        // No key pair named: nothing can be entailed.
        _ => return non_entail_label(spec),
    };
    let first_r = example.tokens_b.iter().position(|&t| t == r);
    let last_e = example.tokens_b.iter().rposition(|&t| t == e);
    match (first_r, last_e) {
        (Some(pr), Some(pe)) if pr < pe => LABEL_ENTAIL,
        (Some(_), Some(_)) => non_entail_label(spec),
        _ => {
            if spec.label_set.len() == 3 {
                LABEL_NEUTRAL
            } else {
                non_entail_label(spec)
            }
        }
    }
}

fn non_entail_label(spec: &SyntheticTaskSpec) -> usize {
    // Two-class: non-entail = 1. Three-class: contradiction = 2.
    spec.label_set.len() - 1
}

/// The shortcut feature value: lexical overlap ratio for overlap tasks, cue
/// presence indicator for claim-only tasks.
pub fn bias_feature(example: &Example, spec: &SyntheticTaskSpec) -> Result<f64, DataError> {
    if example.tokens_b.is_empty() {
        return Err(DataError::EmptyTokens);
    }
    match spec.task_kind {
        TaskKind::OverlapShortcut => {
            let mut set_b: Vec<u32> = example.tokens_b.clone();
            set_b.sort_unstable();
            set_b.dedup();
            let hits = set_b.iter().filter(|t| example.tokens_a.contains(t)).count();
            Ok(hits as f64 / set_b.len() as f64)
        }
        TaskKind::ClaimOnlyShortcut => {
            let cue = token_pools(spec.vocab_size).cue;
            Ok(if example.tokens_b.contains(&cue) { 1.0 } else { 0.0 })
        }
    }
}

/// The four splits of one experiment, on disjoint seed streams: biased train
/// and dev, a decorrelated test set, and an adversarial test set.
#[derive(Debug, Clone)]
pub struct ExperimentSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub ood_decorrelated: Dataset,
    pub ood_adversarial: Dataset,
}

pub fn generate_splits(
    base: &SyntheticTaskSpec,
    num_dev: usize,
    num_ood: usize,
) -> Result<ExperimentSplits, DataError> {
    let mut train_spec = base.clone();
    train_spec.seed = stream_seed(base.seed, 0x7261_494e); // train stream
    let mut dev_spec = base.clone();
    dev_spec.seed = stream_seed(base.seed, 0xde_1f);
    dev_spec.num_examples = num_dev;
    let mut dec_spec = base.clone();
    dec_spec.seed = stream_seed(base.seed, 0x00d_dec);
    dec_spec.num_examples = num_ood;
    dec_spec.bias_strength = 0.0;
    let mut adv_spec = base.clone();
    adv_spec.seed = stream_seed(base.seed, 0x00d_adf);
    adv_spec.num_examples = num_ood;
    adv_spec.adversarial = true;
    Ok(ExperimentSplits {
        train: generate(&train_spec)?,
        dev: generate(&dev_spec)?,
        ood_decorrelated: generate(&dec_spec)?,
        ood_adversarial: generate(&adv_spec)?,
    })
}
