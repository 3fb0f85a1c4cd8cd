//! Flat key-value experiment configs: one `key = value` per line, `#`
//! comments. Keys mirror the config struct field names.

use read_core::data::{SyntheticTaskSpec, TaskKind};
use read_core::model::ModelConfig;
use read_core::train::TrainConfig;
use std::collections::BTreeMap;

pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

const TASK_KEYS: &[&str] = &[
    "task_kind",
    "vocab_size",
    "n_min",
    "n_max",
    "bias_strength",
    "num_examples",
    "label_set",
    "seed",
    "adversarial",
    "tau_hi",
    "tau_lo",
    "num_dev",
    "num_ood",
];

const MODEL_KEYS: &[&str] = &[
    "num_layers",
    "num_ensemble_layers",
    "model_dim",
    "num_heads",
    "ffn_dim",
    "vocab_size",
    "max_seq_len",
    "num_classes",
    "alpha",
    "dropout",
];

const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "batch_size",
    "epochs",
    "warmup_steps",
    "weight_decay",
    "seed",
    "alpha",
    "k",
    "vanilla",
    "grad_clip",
    "debug_grad_partitions",
    "data_dir",
    "out_dir",
];

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("line {}: expected `key = value`, got {raw:?}", idx + 1));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(format!("line {}: duplicate key {key:?}", idx + 1));
            }
        }
        Ok(FlatConfig { entries })
    }

    pub fn check_known_keys(&self, allowed: &[&[&str]]) -> Result<(), String> {
        for key in self.entries.keys() {
            if !allowed.iter().any(|set| set.contains(&key.as_str())) {
                return Err(format!("unknown config key {key:?}"));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, String> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| format!("key {key:?}: cannot parse {raw:?}")),
        }
    }

    fn parse_bool(&self, key: &str, default: bool) -> Result<bool, String> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(format!("key {key:?}: expected true or false, got {other:?}")),
        }
    }

    pub fn required_str(&self, key: &str) -> Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing required key {key:?}"))
    }

    pub fn task_spec(&self) -> Result<SyntheticTaskSpec, String> {
        self.check_known_keys(&[TASK_KEYS])?;
        let task_kind = match self.get("task_kind").unwrap_or("overlap_shortcut") {
            "overlap_shortcut" => TaskKind::OverlapShortcut,
            "claim_only_shortcut" => TaskKind::ClaimOnlyShortcut,
            other => return Err(format!("unknown task_kind {other:?}")),
        };
        let label_set: Vec<String> = self
            .get("label_set")
            .unwrap_or("entail,non-entail")
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        Ok(SyntheticTaskSpec {
            task_kind,
            vocab_size: self.parse_as("vocab_size", 200)?,
            n_min: self.parse_as("n_min", 8)?,
            n_max: self.parse_as("n_max", 16)?,
            bias_strength: self.parse_as("bias_strength", 0.9)?,
            num_examples: self.parse_as("num_examples", 20_000)?,
            label_set,
            seed: self.parse_as("seed", 42u64)?,
            adversarial: self.parse_bool("adversarial", false)?,
            tau_hi: self.parse_as("tau_hi", 0.8)?,
            tau_lo: self.parse_as("tau_lo", 0.3)?,
        })
    }

    pub fn split_sizes(&self) -> Result<(usize, usize), String> {
        Ok((
            self.parse_as("num_dev", 2000)?,
            self.parse_as("num_ood", 2000)?,
        ))
    }

    /// Model and train configs from one flat file. `k` and
    /// `num_ensemble_layers` are the same knob; setting both to different
    /// values is an error.
    pub fn run_configs(&self) -> Result<(ModelConfig, TrainConfig), String> {
        self.check_known_keys(&[MODEL_KEYS, TRAIN_KEYS])?;
        let defaults = ModelConfig::default();
        let k = match (self.get("k"), self.get("num_ensemble_layers")) {
            (Some(a), Some(b)) if a != b => {
                return Err(format!(
                    "k ({a}) and num_ensemble_layers ({b}) disagree; set one"
                ))
            }
            (Some(a), _) | (None, Some(a)) => a
                .parse()
                .map_err(|_| format!("key \"k\": cannot parse {a:?}"))?,
            (None, None) => defaults.num_ensemble_layers,
        };
        let alpha = self.parse_as("alpha", defaults.alpha)?;
        let model = ModelConfig {
            num_layers: self.parse_as("num_layers", defaults.num_layers)?,
            num_ensemble_layers: k,
            model_dim: self.parse_as("model_dim", defaults.model_dim)?,
            num_heads: self.parse_as("num_heads", defaults.num_heads)?,
            ffn_dim: self.parse_as("ffn_dim", defaults.ffn_dim)?,
            vocab_size: self.parse_as("vocab_size", defaults.vocab_size)?,
            max_seq_len: self.parse_as("max_seq_len", defaults.max_seq_len)?,
            num_classes: self.parse_as("num_classes", defaults.num_classes)?,
            alpha,
            dropout: self.parse_as("dropout", defaults.dropout)?,
        };
        let tdefaults = TrainConfig::default();
        let grad_clip = match self.get("grad_clip") {
            None | Some("none") => None,
            Some(raw) => Some(
                raw.parse()
                    .map_err(|_| format!("key \"grad_clip\": cannot parse {raw:?}"))?,
            ),
        };
        let train = TrainConfig {
            learning_rate: self.parse_as("learning_rate", tdefaults.learning_rate)?,
            batch_size: self.parse_as("batch_size", tdefaults.batch_size)?,
            epochs: self.parse_as("epochs", tdefaults.epochs)?,
            warmup_steps: self.parse_as("warmup_steps", tdefaults.warmup_steps)?,
            weight_decay: self.parse_as("weight_decay", tdefaults.weight_decay)?,
            seed: self.parse_as("seed", tdefaults.seed)?,
            alpha,
            k,
            vanilla: self.parse_bool("vanilla", false)?,
            grad_clip,
            debug_grad_partitions: self.parse_bool("debug_grad_partitions", false)?,
        };
        Ok((model, train))
    }
}

/// Label-map files use the same flat syntax: `model_class = eval_class`.
pub fn parse_label_map(text: &str, model_classes: usize) -> Result<Vec<usize>, String> {
    let flat = FlatConfig::parse(text)?;
    let mut map = vec![usize::MAX; model_classes];
    for (key, value) in &flat.entries {
        let from: usize = key
            .parse()
            .map_err(|_| format!("label map key {key:?} is not a class index"))?;
        if from >= model_classes {
            return Err(format!(
                "label map covers class {from}, model predicts {model_classes}"
            ));
        }
        map[from] = value
            .parse()
            .map_err(|_| format!("label map value {value:?} is not a class index"))?;
    }
    if let Some(missing) = map.iter().position(|&v| v == usize::MAX) {
        return Err(format!("label map misses model class {missing}"));
    }
    Ok(map)
}
