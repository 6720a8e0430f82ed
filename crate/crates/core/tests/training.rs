use dualadapt::losses::LossWeights;
use dualadapt::parallel::{with_threads, Execution};
use dualadapt::synth::{generate_split, SynthConfig};
use dualadapt::tensor_store::{read_container, records_to_container, write_container};
use dualadapt::trainer::{resume, train, Output, TrainConfig, TrainState};
use dualadapt::Error;

fn small_data() -> (Vec<dualadapt::tensor_store::FeatureRecord>, dualadapt::tensor_store::TextBank) {
    let cfg = SynthConfig {
        images_per_class: 16,
        d_vis: 12,
        d_text: 8,
        grid: 4,
        ..SynthConfig::default()
    };
    generate_split(&cfg, 0).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        d_b: 8,
        lr: 1e-3,
        seed: 3,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_bitwise_reproducible_across_modes() {
    let (records, bank) = small_data();
    let cfg = small_config(3);
    let a = train(&cfg, &records, &bank, &Output::default(), Execution::Sequential).unwrap();
    let b = with_threads(2, || train(&cfg, &records, &bank, &Output::default(), Execution::Parallel)).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.log, b.log);
    assert_eq!(a.state.to_container().encode().unwrap(), b.state.to_container().encode().unwrap());
    assert_eq!(a.log.len(), 4);
    assert_eq!(a.state.opt.t, 3 * 4);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (records, bank) = small_data();
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let cfg = small_config(6);
    let full = train(&cfg, &records, &bank, &Output { dir: Some(full_dir.clone()) }, Execution::Sequential).unwrap();
    let resumed_dir = dir.path().join("resumed");
    let resumed = resume(
        Output::epoch_path(&full_dir, 2),
        &cfg,
        &records,
        &bank,
        &Output { dir: Some(resumed_dir.clone()) },
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(resumed.state.params, full.state.params);
    assert_eq!(resumed.state, full.state);
    assert_eq!(&full.log[3..], &resumed.log[..]);
    for epoch in [4, 6] {
        let x = std::fs::read(Output::epoch_path(&full_dir, epoch)).unwrap();
        let y = std::fs::read(Output::epoch_path(&resumed_dir, epoch)).unwrap();
        assert_eq!(x, y, "epoch {epoch}");
    }
    let restored = TrainState::from_container(&read_container(Output::final_path(&full_dir)).unwrap()).unwrap();
    assert_eq!(restored, full.state);
}

#[test]
fn resume_rejects_other_configs_and_kinds() {
    let (records, bank) = small_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2);
    train(&cfg, &records, &bank, &Output { dir: Some(dir.path().into()) }, Execution::Sequential).unwrap();
    let ckpt = Output::final_path(dir.path());
    let other = TrainConfig { lr: 5e-4, ..cfg.clone() };
    let err = resume(&ckpt, &other, &records, &bank, &Output::default(), Execution::Sequential).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");
    let longer = TrainConfig { epochs: 3, ..cfg.clone() };
    let r = resume(&ckpt, &longer, &records, &bank, &Output::default(), Execution::Sequential).unwrap();
    assert_eq!(r.state.epoch, 3);

    let features = dir.path().join("features.avaf");
    write_container(&features, &records_to_container(&records)).unwrap();
    let err = resume(&features, &cfg, &records, &bank, &Output::default(), Execution::Sequential).unwrap_err();
    assert!(matches!(err, Error::WrongKind { .. }), "{err}");

    let mut c = read_container(&ckpt).unwrap();
    c.entries.retain(|e| e.name != "router/W_proj");
    let broken = dir.path().join("broken.avaf");
    write_container(&broken, &c).unwrap();
    let err = resume(&broken, &cfg, &records, &bank, &Output::default(), Execution::Sequential).unwrap_err();
    assert!(matches!(err, Error::MissingTensor(_)), "{err}");
}

#[test]
fn zero_lambdas_leave_only_weight_decay() {
    let (records, bank) = small_data();
    let cfg = TrainConfig {
        loss: LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..LossWeights::default()
        },
        ..small_config(2)
    };
    let start = dualadapt::trainer::initial_state(&cfg, &records, &bank).unwrap();
    let out = train(&cfg, &records, &bank, &Output::default(), Execution::Sequential).unwrap();
    let steps = out.state.opt.t as i32;
    let factor = (1.0 - cfg.lr * cfg.weight_decay).powi(steps);
    for ((name, before, is_weight), (_, after, _)) in
        start.params.named_tensors().into_iter().zip(out.state.params.named_tensors())
    {
        for (b, a) in before.iter().zip(after) {
            let expect = if is_weight { b * factor } else { *b };
            assert!((a - expect).abs() <= 1e-15 * b.abs().max(1.0), "{name}: {a} vs {expect}");
        }
    }
}

#[test]
fn loss_decreases_over_training() {
    let (records, bank) = small_data();
    for seed in 0..3 {
        let cfg = TrainConfig { seed, epochs: 20, ..small_config(20) };
        let out = train(&cfg, &records, &bank, &Output::default(), Execution::Sequential).unwrap();
        assert!(out.log[20].loss.total < out.log[1].loss.total, "seed {seed}");
    }
}

#[test]
fn writes_epoch_log_and_checkpoints() {
    let (records, bank) = small_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(4);
    train(&cfg, &records, &bank, &Output { dir: Some(dir.path().into()) }, Execution::Sequential).unwrap();
    let csv = std::fs::read_to_string(Output::log_path(dir.path())).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], dualadapt::trainer::EPOCH_CSV_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,"));
    for e in [2, 4] {
        let c = read_container(Output::epoch_path(dir.path(), e)).unwrap();
        assert_eq!(c.kind(), Some("checkpoint"));
        assert_eq!(c.metadata["epoch"], e.to_string());
        assert!(c.get("opt/router/W_proj/m").is_some());
        assert!(c.get("layer1/n/W1").is_some());
    }
}

#[test]
fn mismatched_data_is_rejected() {
    let (records, bank) = small_data();
    let other = SynthConfig { d_text: 5, images_per_class: 4, d_vis: 12, grid: 4, ..SynthConfig::default() };
    let (_, bank5) = generate_split(&other, 0).unwrap();
    let cfg = small_config(1);
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &records, &bank, &Output { dir: Some(dir.path().into()) }, Execution::Sequential).unwrap();
    let err = resume(Output::final_path(dir.path()), &TrainConfig { epochs: 2, ..cfg }, &records, &bank5, &Output::default(), Execution::Sequential).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)), "{err}");
}
