//! Acceptance suite. Each criterion prints one PASS line when it holds;
//! assertion failures mark the criterion failed.
//!
//! The behavioral criteria (4 and 5) share one experiment: five training
//! seeds of the dual-path model and the single-path baseline on the
//! overlap-shortcut task at the default desk scale. Runs are independent
//! and deterministic, so they are spread over the available cores.

use read_core::data::{
    compute_group_tags, generate, generate_splits, Example, ExperimentSplits, SyntheticTaskSpec,
    TaskKind,
};
use read_core::eval::{attention_stats, evaluate};
use read_core::model::{
    count_parameters, ensemble_attention, EncodedBatch, ForwardMode, ModelConfig, ParamPartition,
    ReadModel,
};
use read_core::objective::{infer_residual_distribution, poe_combine, read_loss_on_tape};
use read_core::rng::Rng;
use read_core::tensor::{check_gradients, Tape, Tensor, Var};
use read_core::train::{train, Checkpoint, TrainConfig};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

// ── shared fixtures ──────────────────────────────────────────────────

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_ensemble_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 24,
        max_seq_len: 16,
        num_classes: 2,
        alpha: 0.1,
        dropout: 0.0,
    }
}

fn example(tokens_a: Vec<u32>, tokens_b: Vec<u32>, label: usize) -> Example {
    Example {
        group_tags: compute_group_tags(&tokens_a, &tokens_b),
        tokens_a,
        tokens_b,
        label,
        shortcut_aligned: false,
    }
}

fn tiny_batch(cfg: &ModelConfig) -> EncodedBatch {
    EncodedBatch::pack(
        &[
            example(vec![5, 6, 7], vec![7, 8], 0),
            example(vec![9, 10], vec![11, 12, 13], 1),
            example(vec![14, 15, 16], vec![16, 15, 17], 1),
        ],
        cfg,
    )
    .unwrap()
}

// ── criterion 1: gradient suite ──────────────────────────────────────

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;

    // Randomized primitive checks.
    for trial in 0..3u64 {
        let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let seed = 100 + trial;
        let report = check_gradients(
            move |tape: &mut Tape, v: Var| {
                let mut orng = Rng::new(seed);
                let w = tape.constant(vec![3, 4], (0..12).map(|_| orng.normal()).collect())?;
                let prod = tape.mul(v, w)?;
                let g = tape.gelu(prod);
                let t = tape.tanh(g);
                let sm = tape.softmax_rows(t, None)?;
                let lsm = tape.log_softmax_rows(sm)?;
                let gain = tape.constant(vec![4], vec![1.0, 0.5, -0.7, 1.2])?;
                let shift = tape.constant(vec![4], vec![0.0, 0.1, -0.1, 0.2])?;
                let ln = tape.layer_normalize(lsm, gain, shift, 1e-8)?;
                let mut r2 = Rng::new(seed + 7);
                let w2 = tape.constant(vec![4, 3], (0..12).map(|_| r2.normal()).collect())?;
                let m = tape.matmul(ln, w2)?;
                Ok(tape.sum(m))
            },
            &x,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "primitive chain: max rel {}", report.max_rel_error);
        worst = worst.max(report.max_rel_error);
    }

    // Composed losses on the stated tiny shape: L = 2, k = 1, d = 8, h = 2.
    let cfg = tiny_config();
    let vanilla = ReadModel::new_vanilla(cfg.clone(), 2024).unwrap();
    let dual = ReadModel::new(cfg.clone(), 2025).unwrap();
    let batch = tiny_batch(&cfg);

    let check_param = |model: &ReadModel, target: usize, main_only: bool| -> f64 {
        let batch = &batch;
        let f = |tape: &mut Tape, x: Var| {
            let mounted: Vec<Var> = model
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if i == target {
                        x
                    } else {
                        let mut frozen = p.tensor.clone();
                        frozen.requires_grad = false;
                        tape.leaf(&frozen)
                    }
                })
                .collect();
            let vars = if main_only {
                read_loss_on_tape(tape, model, &mounted, batch, model.config.alpha, None)
            } else {
                read_core::objective::vanilla_loss_on_tape(tape, model, &mounted, batch, None)
            }
            .map_err(|e| match e {
                read_core::objective::ObjectiveError::Tensor(t) => t,
                other => panic!("loss failed: {other}"),
            })?;
            Ok(vars.total)
        };
        let report = check_gradients(f, &model.params()[target].tensor, 1e-6, 1e-5).unwrap();
        assert!(
            report.passed(),
            "{} (joint={main_only}): max rel {}",
            model.params()[target].name,
            report.max_rel_error
        );
        report.max_rel_error
    };

    // Single-path loss: every parameter. No gradient wall anywhere.
    for target in 0..vanilla.params().len() {
        worst = worst.max(check_param(&vanilla, target, false));
    }
    // Joint loss: main-only parameters; the walls sever the other routes by
    // design and criterion 2 pins those to exact zero.
    for target in 0..dual.params().len() {
        if dual.params()[target].partition == ParamPartition::MainOnly {
            worst = worst.max(check_param(&dual, target, true));
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1} s");
    println!(
        "[PASS] criterion 1: gradient suite, max rel error {worst:.3e} (tol 1e-5), {elapsed:.1} s (< 120 s)"
    );
}

// ── criterion 2: stop-gradient exactness ─────────────────────────────

#[test]
fn criterion_2_stop_gradient_exactness() {
    let cfg = tiny_config();
    let model = ReadModel::new(cfg.clone(), 77).unwrap();
    let batch = tiny_batch(&cfg);
    let mut tape = Tape::new();
    let mounted = model.mount(&mut tape);
    let vars = read_loss_on_tape(&mut tape, &model, &mounted, &batch, cfg.alpha, None).unwrap();

    tape.backward(vars.loss_e).unwrap();
    for (param, var) in model.params().iter().zip(&mounted) {
        let grad = tape.grad_or_zeros(*var);
        match param.partition {
            ParamPartition::BiasOnly => assert!(
                grad.iter().all(|g| g.to_bits() == 0),
                "{}: ensemble loss leaked into a biased-only parameter",
                param.name
            ),
            _ => assert!(
                grad.iter().any(|&g| g != 0.0),
                "{}: no ensemble-loss gradient",
                param.name
            ),
        }
    }

    tape.zero_grads();
    tape.backward(vars.loss_b).unwrap();
    for (param, var) in model.params().iter().zip(&mounted) {
        let grad = tape.grad_or_zeros(*var);
        match param.partition {
            ParamPartition::MainOnly => assert!(
                grad.iter().all(|g| g.to_bits() == 0),
                "{}: biased loss leaked into a main-only parameter",
                param.name
            ),
            _ => assert!(
                grad.iter().any(|&g| g != 0.0),
                "{}: no biased-loss gradient",
                param.name
            ),
        }
    }
    println!(
        "[PASS] criterion 2: gradient partition exact to the bit on {} parameters",
        model.params().len()
    );
}

// ── criterion 3: path algebra ────────────────────────────────────────

#[test]
fn criterion_3_path_algebra() {
    let cfg = tiny_config();
    let batch = tiny_batch(&cfg);

    // Boundary alpha.
    let mut m0 = ReadModel::new(cfg.clone(), 88).unwrap();
    m0.config.alpha = 0.0;
    let main = m0.run_forward(&batch, ForwardMode::MainPath).unwrap();
    let ens = m0.run_forward(&batch, ForwardMode::EnsemblePath).unwrap();
    let mut max_dev: f64 = 0.0;
    for (a, b) in main.values().iter().zip(ens.values()) {
        max_dev = max_dev.max((a - b).abs());
    }
    assert!(max_dev < 1e-10, "alpha=0 deviation {max_dev}");

    // Copied projections at the default ratio.
    let mut mc = ReadModel::new(cfg.clone(), 89).unwrap();
    mc.copy_main_qk_into_bias().unwrap();
    let main = mc.run_forward(&batch, ForwardMode::MainPath).unwrap();
    let ens = mc.run_forward(&batch, ForwardMode::EnsemblePath).unwrap();
    for (a, b) in main.values().iter().zip(ens.values()) {
        max_dev = max_dev.max((a - b).abs());
    }
    assert!(max_dev < 1e-10, "copied-projection deviation {max_dev}");

    // Ensemble attention rows stay distributions.
    let mut rng = Rng::new(90);
    let mut tape = Tape::new();
    for _ in 0..50 {
        let mk_row = |tape: &mut Tape, rng: &mut Rng| {
            let raw = tape
                .constant(vec![2, 6], (0..12).map(|_| rng.normal()).collect())
                .unwrap();
            tape.softmax_rows(raw, None).unwrap()
        };
        let am = mk_row(&mut tape, &mut rng);
        let ab = mk_row(&mut tape, &mut rng);
        let ae = ensemble_attention(&mut tape, am, ab, 0.1).unwrap();
        for row in tape.value(ae).chunks_exact(6) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "ensemble row sum {sum}");
        }
    }

    // Multiplicative combination ignores per-row constants.
    let mut poe_dev: f64 = 0.0;
    for _ in 0..50 {
        let lm = {
            let x = tape
                .constant(vec![2, 4], (0..8).map(|_| rng.normal() * 3.0).collect())
                .unwrap();
            tape.log_softmax_rows(x).unwrap()
        };
        let lb = {
            let x = tape
                .constant(vec![2, 4], (0..8).map(|_| rng.normal() * 3.0).collect())
                .unwrap();
            tape.log_softmax_rows(x).unwrap()
        };
        let base = poe_combine(&mut tape, lm, lb).unwrap();
        let c = rng.normal() * 10.0;
        let offset = tape.constant(vec![2, 4], vec![c; 8]).unwrap();
        let shifted = tape.add(lb, offset).unwrap();
        let moved = poe_combine(&mut tape, lm, shifted).unwrap();
        let base_v = tape.value(base).to_vec();
        for (a, b) in base_v.iter().zip(tape.value(moved)) {
            poe_dev = poe_dev.max((a - b).abs());
        }
    }
    assert!(poe_dev < 1e-10, "poe shift deviation {poe_dev}");

    println!(
        "[PASS] criterion 3: path algebra (path deviation {max_dev:.2e} < 1e-10, ensemble rows sum within 1e-12, poe shift deviation {poe_dev:.2e} < 1e-10)"
    );
}

// ── criteria 4 and 5: the behavioral experiment ──────────────────────

/// From-scratch training needs a larger step than encoder fine-tuning (the
/// 2e-5 default targets pretrained weights); everything else follows the
/// default configs.
const DESK_LR: f64 = 1e-3;
const EXPERIMENT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy)]
struct RunStats {
    id_dev: f64,
    ood_dec: f64,
    ood_adv: f64,
    attn_gap: f64,
}

#[derive(Debug, Clone)]
struct Experiment {
    vanilla: Vec<RunStats>,
    read: Vec<RunStats>,
    wall_seconds: f64,
    workers: usize,
}

fn experiment_splits() -> ExperimentSplits {
    let spec = SyntheticTaskSpec {
        task_kind: TaskKind::OverlapShortcut,
        vocab_size: 200,
        n_min: 8,
        n_max: 16,
        bias_strength: 0.9,
        num_examples: 20_000,
        label_set: vec!["entail".into(), "non-entail".into()],
        seed: 2026,
        adversarial: false,
        tau_hi: 0.8,
        tau_lo: 0.3,
    };
    generate_splits(&spec, 2000, 2000).unwrap()
}

fn run_one(splits: &ExperimentSplits, seed: u64, vanilla: bool) -> RunStats {
    let model_cfg = ModelConfig::default();
    let train_cfg = TrainConfig {
        learning_rate: DESK_LR,
        seed,
        vanilla,
        ..TrainConfig::default()
    };
    let mut model = if vanilla {
        ReadModel::new_vanilla(model_cfg.clone(), seed).unwrap()
    } else {
        ReadModel::new(model_cfg.clone(), seed).unwrap()
    };
    let (best, _history) = train(&mut model, &splits.train, &splits.dev, &train_cfg).unwrap();
    let best_model = best.to_model().unwrap();
    let k = model_cfg.num_ensemble_layers;
    let stats = attention_stats(&best_model, &splits.ood_adversarial, k, ForwardMode::MainPath).unwrap();
    RunStats {
        id_dev: evaluate(&best_model, &splits.dev, None).unwrap().metrics["accuracy"],
        ood_dec: evaluate(&best_model, &splits.ood_decorrelated, None).unwrap().metrics["accuracy"],
        ood_adv: evaluate(&best_model, &splits.ood_adversarial, None).unwrap().metrics["accuracy"],
        attn_gap: stats.overall.gap(),
    }
}

fn behavioral_experiment() -> &'static Experiment {
    static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();
    EXPERIMENT.get_or_init(|| {
        let started = Instant::now();
        let splits = experiment_splits();
        let jobs: Vec<(u64, bool)> = EXPERIMENT_SEEDS
            .iter()
            .flat_map(|&s| [(s, true), (s, false)])
            .collect();
        let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(jobs.len());
        let queue = Mutex::new(jobs.clone().into_iter().enumerate().collect::<Vec<_>>());
        let results: Mutex<Vec<Option<RunStats>>> = Mutex::new(vec![None; jobs.len()]);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let job = queue.lock().unwrap().pop();
                    let Some((idx, (seed, vanilla))) = job else { break };
                    let stats = run_one(&splits, seed, vanilla);
                    eprintln!(
                        "  [{}] seed {seed}: dev {:.4}, ood-dec {:.4}, ood-adv {:.4}, attn gap {:+.4}",
                        if vanilla { "vanilla" } else { "read" },
                        stats.id_dev,
                        stats.ood_dec,
                        stats.ood_adv,
                        stats.attn_gap
                    );
                    results.lock().unwrap()[idx] = Some(stats);
                });
            }
        });
        let results = results.into_inner().unwrap();
        let mut vanilla = Vec::new();
        let mut read = Vec::new();
        for (i, (_, is_vanilla)) in jobs.iter().enumerate() {
            let stats = results[i].expect("job ran");
            if *is_vanilla {
                vanilla.push(stats);
            } else {
                read.push(stats);
            }
        }
        Experiment {
            vanilla,
            read,
            wall_seconds: started.elapsed().as_secs_f64(),
            workers,
        }
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_4_behavioral_debiasing() {
    let exp = behavioral_experiment();
    let van_dev = mean(exp.vanilla.iter().map(|r| r.id_dev));
    let read_dev = mean(exp.read.iter().map(|r| r.id_dev));
    let van_adv = mean(exp.vanilla.iter().map(|r| r.ood_adv));
    let read_adv = mean(exp.read.iter().map(|r| r.ood_adv));

    // The baseline must actually be shortcut-bound before the cure counts:
    // high in-distribution accuracy, collapsing on the anti-correlated split.
    assert!(van_dev >= 0.95, "baseline dev accuracy {van_dev:.4} < 0.95");
    assert!(
        van_dev - van_adv >= 0.20,
        "baseline generalization gap {:.4} < 0.20",
        van_dev - van_adv
    );

    assert!(van_dev >= 0.90 && read_dev >= 0.90, "dev accuracy: vanilla {van_dev:.4}, read {read_dev:.4}");
    assert!(
        van_dev - read_dev <= 0.05,
        "in-distribution drop {:.4} exceeds 5 points",
        van_dev - read_dev
    );
    assert!(
        read_adv - van_adv >= 0.10,
        "adversarial improvement {:.4} below 10 points (read {read_adv:.4}, vanilla {van_adv:.4})",
        read_adv - van_adv
    );

    // Runtime is stated for a laptop-class CPU; extrapolate linearly from
    // the worker count actually used (runs are independent and CPU-bound).
    let eight_core_estimate = exp.wall_seconds * exp.workers as f64 / 8.0;
    assert!(
        eight_core_estimate < 900.0,
        "estimated 8-core runtime {eight_core_estimate:.0} s exceeds 15 min"
    );
    println!(
        "[PASS] criterion 4: ood-adversarial {read_adv:.4} vs {van_adv:.4} (+{:.1} pts >= 10), dev {read_dev:.4}/{van_dev:.4} (both >= 0.90, drop {:.1} pts <= 5); {:.0} s wall on {} workers (~{:.0} s on 8 cores < 900 s)",
        100.0 * (read_adv - van_adv),
        100.0 * (van_dev - read_dev),
        exp.wall_seconds,
        exp.workers,
        eight_core_estimate,
    );
}

#[test]
fn criterion_5_attention_shift_sign_flip() {
    let exp = behavioral_experiment();
    let mut read_positive = 0;
    for (i, (van, read)) in exp.vanilla.iter().zip(&exp.read).enumerate() {
        assert!(
            van.attn_gap < 0.0,
            "seed {}: baseline attention gap {:+.4} is not negative",
            EXPERIMENT_SEEDS[i],
            van.attn_gap
        );
        assert!(
            read.attn_gap > van.attn_gap,
            "seed {}: read gap {:+.4} not greater than baseline {:+.4}",
            EXPERIMENT_SEEDS[i],
            read.attn_gap,
            van.attn_gap
        );
        if read.attn_gap > 0.0 {
            read_positive += 1;
        }
    }
    assert!(read_positive >= 4, "read attention gap positive in only {read_positive}/5 seeds");
    println!(
        "[PASS] criterion 5: attention gap negative for baseline on 5/5 seeds, read greater on 5/5 and positive on {read_positive}/5 (mean {:+.4} vs {:+.4})",
        mean(exp.read.iter().map(|r| r.attn_gap)),
        mean(exp.vanilla.iter().map(|r| r.attn_gap)),
    );
}

// ── criterion 6: residual-distribution oracle ────────────────────────

#[test]
fn criterion_6_residual_distribution_oracle() {
    let pe = [1e-8, 1.0 - 1e-8];
    let pb = [1e-6, 1.0 - 1e-6];
    let pm = infer_residual_distribution(&pe, &pb).unwrap();
    assert!((pm[0] - 0.009_901).abs() < 1e-6, "{pm:?}");
    assert!((pm[1] - 0.990_099).abs() < 1e-6, "{pm:?}");
    // The often-quoted [0.99, 0.01] corresponds to the swapped arguments;
    // the function documentation records the discrepancy.
    let swapped = infer_residual_distribution(&pb, &pe).unwrap();
    assert!((swapped[0] - 0.990_099).abs() < 1e-6);
    println!(
        "[PASS] criterion 6: residual distribution [{:.6}, {:.6}] (swapped order gives [{:.2}, {:.2}])",
        pm[0], pm[1], swapped[0], swapped[1]
    );
}

// ── criterion 7: parameter-count reconstruction ──────────────────────

#[test]
fn criterion_7_parameter_counts() {
    let base = ModelConfig {
        num_layers: 12,
        num_ensemble_layers: 4,
        model_dim: 768,
        num_heads: 12,
        ffn_dim: 3072,
        vocab_size: 30_522,
        max_seq_len: 512,
        num_classes: 3,
        alpha: 0.1,
        dropout: 0.1,
    };
    let counts = count_parameters(&base);
    assert_eq!(counts.bias_only, 5_317_635);

    let tiny = ModelConfig {
        num_layers: 2,
        num_ensemble_layers: 1,
        model_dim: 4,
        num_heads: 1,
        ffn_dim: 8,
        vocab_size: 20,
        max_seq_len: 8,
        num_classes: 2,
        alpha: 0.1,
        dropout: 0.0,
    };
    assert_eq!(count_parameters(&tiny).bias_only, 70);
    println!(
        "[PASS] criterion 7: biased-branch parameters 5,317,635 (~5.3M) at the base encoder shape; 70 at the tiny hand-counted shape"
    );
}

// ── criterion 8: determinism and persistence ─────────────────────────

#[test]
fn criterion_8_determinism_and_persistence() {
    // Fixed-seed training reproduces its history bit for bit.
    let spec = SyntheticTaskSpec {
        task_kind: TaskKind::OverlapShortcut,
        vocab_size: 80,
        n_min: 7,
        n_max: 10,
        bias_strength: 0.9,
        num_examples: 48,
        label_set: vec!["entail".into(), "non-entail".into()],
        seed: 33,
        adversarial: false,
        tau_hi: 0.8,
        tau_lo: 0.3,
    };
    let train_set = generate(&spec).unwrap();
    let mut dev_spec = spec.clone();
    dev_spec.seed = 34;
    dev_spec.num_examples = 16;
    let dev_set = generate(&dev_spec).unwrap();
    let cfg = ModelConfig {
        vocab_size: 80,
        max_seq_len: 32,
        num_layers: 2,
        num_ensemble_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 2,
        seed: 9,
        k: 1,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = ReadModel::new(cfg.clone(), 9).unwrap();
        train(&mut model, &train_set, &dev_set, &tc).unwrap()
    };
    let (ckpt1, h1) = run();
    let (_, h2) = run();
    assert_eq!(h1.len(), h2.len());
    for (a, b) in h1.iter().zip(&h2) {
        assert_eq!(a.mean_loss_e.to_bits(), b.mean_loss_e.to_bits());
        assert_eq!(a.mean_loss_b.to_bits(), b.mean_loss_b.to_bits());
        assert_eq!(a.dev_accuracy.to_bits(), b.dev_accuracy.to_bits());
    }

    // Checkpoint round trip reproduces forwards bitwise.
    let dir = std::env::temp_dir().join("read-acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("best.ckpt");
    ckpt1.save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let original = ckpt1.to_model().unwrap();
    let probe: Vec<Example> = train_set.examples[..8].to_vec();
    let batch = EncodedBatch::pack(&probe, &cfg).unwrap();
    for mode in [ForwardMode::MainPath, ForwardMode::BiasPath, ForwardMode::EnsemblePath] {
        let a = original.run_forward(&batch, mode).unwrap();
        let b = restored.run_forward(&batch, mode).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{mode:?} forward differs after reload");
        }
    }

    // Dataset generation is byte-identical for identical specs.
    let (p1, p2) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    read_core::data::write_jsonl(&generate(&spec).unwrap(), &p1).unwrap();
    read_core::data::write_jsonl(&generate(&spec).unwrap(), &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    println!(
        "[PASS] criterion 8: bit-identical history over {} epochs, bitwise checkpoint round trip, byte-identical dataset generation",
        h1.len()
    );
}
