//! Training-loop behavior: descent on a fixed batch, checkpoint
//! round-trips, and interrupted-vs-uninterrupted equivalence.

use tempo_core::checkpoint::{load_checkpoint, save_checkpoint};
use tempo_core::config::ModelConfig;
use tempo_core::head::SequenceSample;
use tempo_core::optim::{adamw_step, OptimState};
use tempo_core::params::ParameterStore;
use tempo_core::synth::{gen_dataset, SceneSpec};
use tempo_core::trainer::{resume, sample_grads, train, TrainConfig};
use tempo_core::tensor::Tensor;
use std::collections::BTreeMap;

fn fixed_batch() -> Vec<SequenceSample> {
    gen_dataset(&SceneSpec::desk(21), 8, 4).unwrap()
}

fn batch_step(store: &mut ParameterStore, batch: &[SequenceSample], cfg: &ModelConfig, state: &mut OptimState) -> f64 {
    let mut loss_sum = 0.0;
    let mut acc: BTreeMap<String, Vec<f64>> = store
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
        .collect();
    for s in batch {
        let (loss, grads) = sample_grads(store, s, cfg).unwrap();
        loss_sum += loss;
        for (name, g) in grads {
            let slot = acc.get_mut(&name).unwrap();
            for (a, v) in slot.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grads: BTreeMap<String, Tensor> = acc
        .into_iter()
        .map(|(name, mut data)| {
            for v in data.iter_mut() {
                *v *= scale;
            }
            let shape = store.get(&name).unwrap().shape().to_vec();
            (name.clone(), Tensor::new(shape, data).unwrap())
        })
        .collect();
    adamw_step(store, &grads, state).unwrap();
    loss_sum * scale
}

#[test]
fn loss_trends_down_over_fifty_steps_on_fixed_batch() {
    let cfg = ModelConfig::desk();
    let batch = fixed_batch();
    let mut store = ParameterStore::init(&cfg, 3).unwrap();
    let mut state = OptimState::new(&store, 1e-3, 1e-4);

    let mut losses = Vec::with_capacity(50);
    for _ in 0..50 {
        losses.push(batch_step(&mut store, &batch, &cfg, &mut state));
    }
    // 5-step moving average must be non-increasing
    let smooth: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for pair in smooth.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-9,
            "smoothed loss increased: {} -> {} (full: {losses:?})",
            pair[0],
            pair[1]
        );
    }
    assert!(losses.last().unwrap() < losses.first().unwrap());
}

#[test]
fn checkpoint_roundtrip_reproduces_next_step_loss() {
    let cfg = ModelConfig::desk();
    let batch = fixed_batch();
    let mut store = ParameterStore::init(&cfg, 5).unwrap();
    let mut state = OptimState::new(&store, 1e-3, 1e-4);
    for _ in 0..3 {
        batch_step(&mut store, &batch, &cfg, &mut state);
    }

    let dir = std::env::temp_dir().join(format!("tempo-train-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("mid.tmpc");
    save_checkpoint(&path, &cfg, &store, &state, 0).unwrap();

    let mut direct_store = store.clone();
    let mut direct_state = state.clone();
    let direct_loss = batch_step(&mut direct_store, &batch, &cfg, &mut direct_state);

    let ckpt = load_checkpoint(&path, Some(&cfg)).unwrap();
    let mut loaded_store = ckpt.store;
    let mut loaded_state = ckpt.optim;
    let loaded_loss = batch_step(&mut loaded_store, &batch, &cfg, &mut loaded_state);

    assert_eq!(direct_loss.to_bits(), loaded_loss.to_bits());
    assert_eq!(direct_store, loaded_store);
}

#[test]
fn resumed_training_equals_uninterrupted_training() {
    let mcfg = ModelConfig::desk();
    let ds = gen_dataset(&SceneSpec::desk(33), 24, 4).unwrap();
    let mut tcfg = TrainConfig::desk(13);
    tcfg.epochs = 4;
    tcfg.eval_samples = 8;

    let dir = std::env::temp_dir().join(format!("tempo-resume-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);

    let full = train(&ds, None, &mcfg, &tcfg, Some(&dir)).unwrap();

    // interrupted run: stop after epoch 1, resume from its checkpoint
    let ckpt = load_checkpoint(&dir.join("ckpt-0001.tmpc"), Some(&mcfg)).unwrap();
    assert_eq!(ckpt.next_epoch, 2);
    let resumed = resume(ckpt, &ds, None, &tcfg, None).unwrap();

    assert_eq!(full.store, resumed.store);
    assert_eq!(full.optim.step, resumed.optim.step);
    // records for epochs 2..4 must agree bit-for-bit apart from wall time
    let tail = &full.records[2..];
    for (a, b) in tail.iter().zip(&resumed.records) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.exact_match, b.exact_match);
        assert_eq!(a.kendall_tau, b.kendall_tau);
    }
    // the resumed run applies the decayed rate for its first epoch
    assert_eq!(resumed.records[0].epoch, 2);
    assert_eq!(resumed.records[0].lr, tempo_core::trainer::lr_at(2, &tcfg));
}

#[test]
fn metrics_lines_are_valid_json_with_expected_fields() {
    let mcfg = ModelConfig::desk();
    let ds = gen_dataset(&SceneSpec::desk(44), 8, 4).unwrap();
    let mut tcfg = TrainConfig::desk(1);
    tcfg.epochs = 2;
    tcfg.eval_samples = 4;

    let dir = std::env::temp_dir().join(format!("tempo-metrics-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    train(&ds, None, &mcfg, &tcfg, Some(&dir)).unwrap();

    let text = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], i);
        for key in ["lr", "loss", "exact_match", "kendall_tau", "wall_ms"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    // checkpoints for both epochs exist
    assert!(dir.join("ckpt-0000.tmpc").exists());
    assert!(dir.join("ckpt-0001.tmpc").exists());
}
