//! Experiment driver: data generation, training, evaluation, the attention
//! audit and the ensemble-layer ablation, over flat config files and JSONL
//! datasets.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.

mod config;

use clap::{Parser, Subcommand};
use config::{parse_label_map, FlatConfig};
use read_core::data::{self, DataError, Dataset};
use read_core::eval::{
    ablate_ensemble_layers, attention_stats_detailed, emit_report, evaluate, write_ablation_csv,
    EvalError, LabelMap, ReportFormat,
};
use read_core::model::{ForwardMode, ModelError, ReadModel};
use read_core::objective::ObjectiveError;
use read_core::train::{train_observed, Checkpoint, TrainError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Error = 0,
    Info = 1,
    Debug = 2,
}

static LOG_LEVEL: OnceLock<LogLevel> = OnceLock::new();

fn log_enabled(level: LogLevel) -> bool {
    level <= *LOG_LEVEL.get().unwrap_or(&LogLevel::Info)
}

macro_rules! info {
    ($($arg:tt)*) => { if log_enabled(LogLevel::Info) { eprintln!($($arg)*); } };
}

macro_rules! debug {
    ($($arg:tt)*) => { if log_enabled(LogLevel::Debug) { eprintln!($($arg)*); } };
}

#[derive(Parser)]
#[command(name = "read-cli", about = "Residual attention debiasing experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four experiment splits from a task spec.
    #[command(name = "generate-data")]
    GenerateData {
        /// Flat task-spec file.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for the JSONL splits.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on train.jsonl/dev.jsonl and keep the best checkpoint.
    Train {
        /// Flat model+train config file.
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.jsonl and dev.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for best.ckpt and history files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a JSONL dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional label collapse, `model_class = eval_class` per line.
        #[arg(long)]
        label_map: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// json or csv.
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// First-token attention audit at one layer of one path.
    #[command(name = "attn-stats")]
    AttnStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// 1-based layer index.
        #[arg(long)]
        layer: usize,
        /// main, ensemble or bias.
        #[arg(long)]
        path: String,
        /// Include per-head group means.
        #[arg(long)]
        per_head: bool,
        /// Write the stats bundle here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per (k, seed) and tabulate the three splits.
    Ablate {
        /// Flat model+train config; must name data_dir.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ensemble depths, e.g. 1,2,4.
        #[arg(long)]
        k: String,
        /// Number of seeds, derived from the config seed upward.
        #[arg(long)]
        seeds: usize,
        /// Output CSV path.
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
}

/// Errors mapped onto the documented exit codes.
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::InvalidTokenId { .. }
            | ModelError::ReservedTokenId { .. }
            | ModelError::SequenceTooLong { .. }
            | ModelError::EmptyBatch => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. }
            | TrainError::NonFiniteGrad { .. }
            | TrainError::PartitionViolation { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Objective(o) => o.into(),
            TrainError::EmptyDataset { .. }
            | TrainError::Io(_)
            | TrainError::BadHeader
            | TrainError::VersionMismatch { .. }
            | TrainError::ChecksumFailure { .. }
            | TrainError::Truncated { .. }
            | TrainError::ManifestMismatch { .. } => CliError::Data(e.to_string()),
            TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Model(m) => m.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::IncompatibleLabels { .. } | EvalError::InvalidLayerPath { .. } => {
                CliError::Usage(e.to_string())
            }
            EvalError::EmptyDataset => CliError::Data(e.to_string()),
            EvalError::Io(_) => CliError::Data(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Objective(o) => o.into(),
            EvalError::Train(t) => t.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io: {e}"))
    }
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("READ_LOG_LEVEL") {
        Err(_) => LogLevel::Info,
        Ok(v) => match v.as_str() {
            "error" => LogLevel::Error,
            "info" => LogLevel::Info,
            "debug" => LogLevel::Debug,
            other => {
                return Err(CliError::Usage(format!(
                    "READ_LOG_LEVEL must be error, info or debug, got {other:?}"
                )))
            }
        },
    };
    let _ = LOG_LEVEL.set(level);
    Ok(())
}

fn read_config(path: &Path) -> Result<FlatConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    FlatConfig::parse(&text).map_err(CliError::Usage)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(data::read_jsonl(path)?)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn cmd_generate_data(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let flat = read_config(spec_path)?;
    let spec = flat.task_spec().map_err(CliError::Usage)?;
    let (num_dev, num_ood) = flat.split_sizes().map_err(CliError::Usage)?;
    std::fs::create_dir_all(out)?;
    let splits = data::generate_splits(&spec, num_dev, num_ood)?;
    for (name, ds) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("ood_decorrelated", &splits.ood_decorrelated),
        ("ood_adversarial", &splits.ood_adversarial),
    ] {
        let path = out.join(format!("{name}.jsonl"));
        data::write_jsonl(ds, &path)?;
        info!("wrote {} examples to {}", ds.len(), path.display());
    }
    Ok(())
}

fn cmd_train(config_path: &Path, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let flat = read_config(config_path)?;
    let (model_cfg, train_cfg) = flat.run_configs().map_err(CliError::Usage)?;
    let train_set = load_dataset(&data_dir.join("train.jsonl"))?;
    let dev_set = load_dataset(&data_dir.join("dev.jsonl"))?;
    info!(
        "training {} model: L={}, k={}, d={}, {} train / {} dev examples",
        if train_cfg.vanilla { "vanilla" } else { "dual-path" },
        model_cfg.num_layers,
        model_cfg.num_ensemble_layers,
        model_cfg.model_dim,
        train_set.len(),
        dev_set.len()
    );
    let mut model = if train_cfg.vanilla {
        ReadModel::new_vanilla(model_cfg, train_cfg.seed)?
    } else {
        ReadModel::new(model_cfg, train_cfg.seed)?
    };
    let (best, history) = train_observed(&mut model, &train_set, &dev_set, &train_cfg, |stats| {
        info!(
            "epoch {}: loss_e {:.4}, loss_b {:.4}, dev accuracy {:.4}",
            stats.epoch, stats.mean_loss_e, stats.mean_loss_b, stats.dev_accuracy
        );
    })?;

    std::fs::create_dir_all(out)?;
    let ckpt_path = out.join("best.ckpt");
    best.save(&ckpt_path)?;
    let history_json = serde_json::to_string_pretty(&history).expect("history serializes");
    std::fs::write(out.join("history.json"), history_json + "\n")?;
    let mut csv = String::from("epoch,mean_loss_e,mean_loss_b,dev_accuracy\n");
    for h in &history {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.mean_loss_e, h.mean_loss_b, h.dev_accuracy
        ));
    }
    std::fs::write(out.join("history.csv"), csv)?;
    info!(
        "best checkpoint: dev accuracy {:.4} at step {} -> {}",
        best.manifest.dev_metric.unwrap_or(f64::NAN),
        best.manifest.step,
        ckpt_path.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(ReadModel, Checkpoint), CliError> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let model = checkpoint.to_model()?;
    debug!(
        "loaded checkpoint {} (variant {}, step {})",
        checkpoint.manifest.checkpoint_id, checkpoint.manifest.variant, checkpoint.manifest.step
    );
    Ok((model, checkpoint))
}

fn cmd_evaluate(
    ckpt: &Path,
    data_path: &Path,
    label_map: Option<&Path>,
    out: Option<&Path>,
    format: &str,
) -> Result<(), CliError> {
    let format: ReportFormat = format.parse().map_err(CliError::Usage)?;
    let (model, checkpoint) = load_model(ckpt)?;
    let dataset = load_dataset(data_path)?;
    let map = match label_map {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read label map: {e}")))?;
            Some(LabelMap(
                parse_label_map(&text, model.config.num_classes).map_err(CliError::Usage)?,
            ))
        }
    };
    let mut report = evaluate(&model, &dataset, map.as_ref())?;
    report.dataset_id = file_stem(data_path);
    report.split = file_stem(data_path);
    report.checkpoint_id = Some(checkpoint.manifest.checkpoint_id.clone());
    report.seed = checkpoint
        .manifest
        .train_config
        .as_ref()
        .map_or(0, |c| c.seed);
    match out {
        Some(path) => {
            emit_report(std::slice::from_ref(&report), &[], path, format)?;
            info!("wrote report to {}", path.display());
        }
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
    }
    Ok(())
}

fn parse_path_mode(s: &str) -> Result<ForwardMode, CliError> {
    match s {
        "main" => Ok(ForwardMode::MainPath),
        "ensemble" => Ok(ForwardMode::EnsemblePath),
        "bias" => Ok(ForwardMode::BiasPath),
        other => Err(CliError::Usage(format!(
            "path must be main, ensemble or bias, got {other:?}"
        ))),
    }
}

fn cmd_attn_stats(
    ckpt: &Path,
    data_path: &Path,
    layer: usize,
    path_mode: &str,
    per_head: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mode = parse_path_mode(path_mode)?;
    let (model, _) = load_model(ckpt)?;
    let dataset = load_dataset(data_path)?;
    let stats = attention_stats_detailed(&model, &dataset, layer, mode, per_head)?;
    info!(
        "layer {} {:?}: overlap {:.4}, non-overlap {:.4}, special {:.4} (gap {:+.4})",
        stats.layer,
        stats.path,
        stats.overall.overlapping,
        stats.overall.non_overlapping,
        stats.overall.special,
        stats.overall.gap()
    );
    match out {
        Some(path) => {
            emit_report(&[], std::slice::from_ref(&stats), path, ReportFormat::Json)?;
            info!("wrote attention stats to {}", path.display());
        }
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&stats).expect("stats serialize")
            );
        }
    }
    Ok(())
}

fn cmd_ablate(config_path: &Path, k_list: &str, num_seeds: usize, out: &Path) -> Result<(), CliError> {
    let flat = read_config(config_path)?;
    let (model_cfg, train_cfg) = flat.run_configs().map_err(CliError::Usage)?;
    let data_dir = PathBuf::from(flat.required_str("data_dir").map_err(CliError::Usage)?);
    let k_values: Vec<usize> = k_list
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("cannot parse k list {k_list:?}")))?;
    if k_values.is_empty() || num_seeds == 0 {
        return Err(CliError::Usage("need at least one k and one seed".into()));
    }
    let seeds: Vec<u64> = (0..num_seeds as u64).map(|i| train_cfg.seed + i).collect();
    let splits = read_core::data::ExperimentSplits {
        train: load_dataset(&data_dir.join("train.jsonl"))?,
        dev: load_dataset(&data_dir.join("dev.jsonl"))?,
        ood_decorrelated: load_dataset(&data_dir.join("ood_decorrelated.jsonl"))?,
        ood_adversarial: load_dataset(&data_dir.join("ood_adversarial.jsonl"))?,
    };
    info!("ablating k in {k_values:?} over seeds {seeds:?}");
    let table = ablate_ensemble_layers(&model_cfg, &train_cfg, &splits, &k_values, &seeds)?;
    for row in &table.rows {
        info!(
            "k={}: dev {:.4}±{:.4}, ood-decorrelated {:.4}±{:.4}, ood-adversarial {:.4}±{:.4}",
            row.k,
            row.id_dev.mean,
            row.id_dev.sd,
            row.ood_decorrelated.mean,
            row.ood_decorrelated.sd,
            row.ood_adversarial.mean,
            row.ood_adversarial.sd
        );
    }
    write_ablation_csv(&table, out)?;
    info!("wrote ablation table to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenerateData { spec, out } => cmd_generate_data(spec, out),
        Command::Train { config, data, out } => cmd_train(config, data, out),
        Command::Evaluate { ckpt, data, label_map, out, format } => {
            cmd_evaluate(ckpt, data, label_map.as_deref(), out.as_deref(), format)
        }
        Command::AttnStats { ckpt, data, layer, path, per_head, out } => {
            cmd_attn_stats(ckpt, data, *layer, path, *per_head, out.as_deref())
        }
        Command::Ablate { config, k, seeds, out } => cmd_ablate(config, k, *seeds, out),
    }
}

fn main() -> ExitCode {
    if let Err(e) = init_logging() {
        eprintln!("error: {}", e.message());
        return ExitCode::from(e.code());
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
