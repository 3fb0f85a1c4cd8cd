//! Scratch profiling probe. cargo test -p read-core --test probe_profile -- --ignored --nocapture
use read_core::data::{generate, SyntheticTaskSpec, TaskKind};
use read_core::model::{EncodedBatch, ForwardMode, ModelConfig, ReadModel};
use read_core::objective::read_loss_on_tape;
use read_core::tensor::Tape;
use std::time::Instant;

#[test]
#[ignore]
fn profile_phases() {
    let cfg = ModelConfig {
        num_layers: 6, num_ensemble_layers: 4, model_dim: 64, num_heads: 4,
        ffn_dim: 128, vocab_size: 200, max_seq_len: 64, num_classes: 2,
        alpha: 0.1, dropout: 0.0,
    };
    let ds = generate(&SyntheticTaskSpec {
        task_kind: TaskKind::OverlapShortcut, vocab_size: 200, n_min: 8, n_max: 16,
        bias_strength: 0.9, num_examples: 32, label_set: vec!["e".into(), "n".into()],
        seed: 1, adversarial: false, tau_hi: 0.8, tau_lo: 0.3,
    }).unwrap();
    let model = ReadModel::new(cfg.clone(), 1).unwrap();
    let batch = EncodedBatch::pack(&ds.examples, &cfg).unwrap();
    let iters = 30;

    let mut tape = Tape::new();
    let t0 = Instant::now();
    for _ in 0..iters { tape.reset(); let _m = model.mount(&mut tape); }
    eprintln!("mount: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/iters as f64);

    for (name, mode) in [("main fwd", ForwardMode::MainPath), ("bias fwd", ForwardMode::BiasPath), ("ens fwd", ForwardMode::EnsemblePath)] {
        let t0 = Instant::now();
        for _ in 0..iters {
            tape.reset();
            let m = model.mount(&mut tape);
            let _ = model.forward_on_tape(&mut tape, &m, &batch, mode, 0.1, None, None).unwrap();
        }
        eprintln!("{name}: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/iters as f64);
    }

    let t0 = Instant::now();
    for _ in 0..iters {
        tape.reset();
        let m = model.mount(&mut tape);
        let _ = read_loss_on_tape(&mut tape, &model, &m, &batch, 0.1, None).unwrap();
    }
    eprintln!("read_loss fwd: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/iters as f64);

    let t0 = Instant::now();
    for _ in 0..iters {
        tape.reset();
        let m = model.mount(&mut tape);
        let vars = read_loss_on_tape(&mut tape, &model, &m, &batch, 0.1, None).unwrap();
        tape.backward(vars.total).unwrap();
    }
    eprintln!("read_loss fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/iters as f64);
}
