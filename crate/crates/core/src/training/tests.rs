use rand::Rng;

use super::*;
use crate::evaluation::RunMetrics;
use crate::model::{build_model, Arch, BranchKind};
use crate::nn::LayerSpec;

fn tiny_head() -> Sequential {
    Sequential::new(
        HEAD_PREFIX,
        vec![
            LayerSpec::Dense {
                inputs: 4,
                units: 8,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 8,
                units: 6,
            },
            LayerSpec::Softmax,
        ],
    )
}

/// Six noisy clusters, one per class.
fn clusters(n_per_class: usize, width: usize, seed: u64) -> FeatureSet {
    let mut rng = seed::rng(seed, &[]);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_per_class * 6 {
        let class = i % 6;
        for d in 0..width {
            let centre = if d % 6 == class { 2.0 } else { 0.0 };
            data.push(centre + rng.gen_range(-0.5f32..0.5));
        }
        labels.push(class);
    }
    FeatureSet::new(
        Tensor::from_vec(&[labels.len(), width], data).unwrap(),
        labels,
    )
    .unwrap()
}

fn split(width: usize) -> SplitFeatures {
    SplitFeatures {
        train: clusters(20, width, 1),
        val: clusters(5, width, 2),
        test: clusters(5, width, 3),
    }
}

fn config(patience: usize, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        patience,
        max_epochs,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn scripted(stream: Vec<f64>, patience: usize, max_epochs: usize) -> TrainState {
    let head = tiny_head();
    let data = clusters(2, 4, 0);
    let mut state = TrainState::new(&head, config(patience, max_epochs), 1).unwrap();
    state
        .run(&head, &data, &mut ScriptedLosses(stream), None, None)
        .unwrap();
    state
}

#[test]
fn plateau_stops_after_patience() {
    let s = scripted(vec![1.0, 0.9, 0.9], 3, 100);
    assert_eq!((s.stop_epoch(), s.stopper.best_epoch), (5, 2));
    assert!(s.finished);
}

#[test]
fn ties_do_not_reset_patience() {
    let s = scripted(vec![1.0, 0.8, 0.9, 0.8, 0.7, 0.7, 0.75], 3, 100);
    assert_eq!((s.stopper.best_epoch, s.stop_epoch()), (5, 8));
}

#[test]
fn decreasing_losses_run_to_cap() {
    let stream: Vec<f64> = (0..12).map(|i| 1.0 / (i + 1) as f64).collect();
    let s = scripted(stream, 3, 12);
    assert_eq!((s.stop_epoch(), s.stopper.best_epoch), (12, 12));
}

#[test]
fn best_snapshot_tracks_best_epoch() {
    let head = tiny_head();
    let data = clusters(4, 4, 0);
    let mut state = TrainState::new(&head, config(2, 50), 9).unwrap();
    let mut snapshots = vec![state.weights.clone()];
    let mut v = ScriptedLosses(vec![1.0, 0.5, 0.7, 0.6]);
    while !state.finished {
        state.step(&head, &data, &mut v).unwrap();
        snapshots.push(state.weights.clone());
    }
    assert_eq!(state.stopper.best_epoch, 2);
    assert_eq!(state.best_weights, snapshots[2]);
    assert!(matches!(
        state.step(&head, &data, &mut v),
        Err(Error::State(_))
    ));
}

#[test]
fn training_reduces_loss_and_restore_reproduces_best() {
    let data = split(64);
    let mut model =
        build_model(&ModelConfig::new(Arch::Mono, 512, 0.3, BranchKind::Small, 4).unwrap())
            .unwrap();
    let branches_before = model.branch_hash();
    let record = train_run(&mut model, &data, config(3, 15), 0, 11).unwrap();
    let first = record.history.first().unwrap().train_loss;
    let last = record.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    let reeval = mean_loss(&model.head, &model.head_weights(), &data.val).unwrap();
    assert!((reeval - record.best_val_loss).abs() < 1e-6);
    assert_eq!(
        record.history[record.best_epoch - 1].val_loss,
        record.best_val_loss
    );
    assert_eq!(model.branch_hash(), branches_before);
    assert!(
        record.test_metrics.macro_f1 > 0.9,
        "{:?}",
        record.test_metrics
    );
}

#[test]
fn empty_partition_is_insufficient_data() {
    let mut data = split(64);
    data.val = FeatureSet::new(Tensor::zeros(&[0, 64]), vec![]).unwrap();
    let mut model =
        build_model(&ModelConfig::new(Arch::Mono, 512, 0.0, BranchKind::Small, 4).unwrap())
            .unwrap();
    assert!(matches!(
        train_run(&mut model, &data, config(3, 5), 0, 1),
        Err(Error::InsufficientData(_))
    ));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("run.ckpt");
    let head = tiny_head();
    let data = split(4);
    let cfg = config(4, 12);

    let mut whole = TrainState::new(&head, cfg, 21).unwrap();
    whole
        .run(&head, &data.train, &mut &data.val, None, None)
        .unwrap();

    let mut part = TrainState::new(&head, cfg, 21).unwrap();
    part.run(&head, &data.train, &mut &data.val, Some(&ckpt), Some(3))
        .unwrap();
    assert_eq!(part.epoch, 3);
    drop(part);
    let mut resumed = resume(&ckpt).unwrap();
    assert_eq!(resumed.epoch, 3);
    resumed
        .run(&head, &data.train, &mut &data.val, Some(&ckpt), None)
        .unwrap();

    let strip = |s: &TrainState| {
        let mut s = s.clone();
        s.history.iter_mut().for_each(|e| e.seconds = 0.0);
        s
    };
    assert_eq!(strip(&resumed), strip(&whole));

    // A finished checkpoint resumes to its terminal state and runs no epochs.
    let mut done = resume(&ckpt).unwrap();
    assert!(done.finished);
    let before = done.clone();
    done.run(&head, &data.train, &mut &data.val, None, None)
        .unwrap();
    assert_eq!(done, before);
}

#[test]
fn bad_checkpoints_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    assert!(matches!(resume(&missing), Err(Error::Format(_))));

    let head = tiny_head();
    let data = clusters(2, 4, 0);
    let mut state = TrainState::new(&head, config(2, 3), 5).unwrap();
    let path = dir.path().join("a.ckpt");
    state
        .run(
            &head,
            &data,
            &mut ScriptedLosses(vec![1.0]),
            Some(&path),
            None,
        )
        .unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(resume(&path), Err(Error::Format(_))));
    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(resume(&path), Err(Error::Format(_))));
}

#[test]
fn run_log_layout() {
    let s = scripted(vec![1.0, 0.5], 1, 10);
    let csv = run_log_csv(&s.history);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,seconds");
    assert_eq!(lines.len(), 1 + s.history.len());
    assert!(lines[2].starts_with("2,"));
}

fn fake_record(config: &ModelConfig, run: usize, seed: u64, val: f64, test: f64) -> RunRecord {
    let metrics = |f: f64| {
        let mut m = RunMetrics::default();
        m.per_class.iter_mut().for_each(|c| c.f1 = f);
        m.macro_f1 = f;
        m
    };
    RunRecord {
        config: *config,
        run_index: run,
        run_seed: seed,
        history: vec![],
        best_epoch: 1,
        best_val_loss: 0.0,
        stop_epoch: 1,
        val_metrics: metrics(val),
        test_metrics: metrics(test),
        seconds: 0.0,
    }
}

#[test]
fn full_grid_bookkeeping() {
    let spec = GridSpec::full(BranchKind::Vgg16, 7, TrainConfig::default());
    let configs = spec.configs().unwrap();
    assert_eq!(configs.len(), 45);
    for arch in Arch::ALL {
        assert_eq!(configs.iter().filter(|c| c.arch == arch).count(), 15);
    }
    let mut calls = Vec::new();
    let (records, summary) = run_grid_with(&spec, |c, run, seed| {
        calls.push((c.key(), run, seed));
        Ok(fake_record(c, run, seed, 0.5, 0.5))
    })
    .unwrap();
    assert_eq!(
        (records.len(), calls.len(), summary.configs.len()),
        (135, 135, 45)
    );
    assert!(summary.configs.iter().all(|c| c.runs == 3));
    let seeds: std::collections::BTreeSet<u64> = calls.iter().map(|c| c.2).collect();
    assert_eq!(seeds.len(), 3);
}

#[test]
fn selection_ignores_test_scores() {
    let spec = GridSpec {
        archs: vec![Arch::Mono, Arch::Di],
        fc: vec![512, 1024],
        dropout: vec![0.0],
        runs_per_config: 2,
        ..GridSpec::full(BranchKind::Small, 3, TrainConfig::default())
    };
    // fc1024 validates better; fc512 tests better.
    let (_, summary) = run_grid_with(&spec, |c, run, seed| {
        let (val, test) = if c.fc_neurons == 1024 {
            (0.8, 0.6)
        } else {
            (0.7, 0.99)
        };
        Ok(fake_record(c, run, seed, val, test))
    })
    .unwrap();
    for arch in [Arch::Mono, Arch::Di] {
        assert_eq!(summary.selected(arch).unwrap().config.fc_neurons, 1024);
    }
    let csv = summary.to_csv();
    assert_eq!(csv.lines().filter(|l| l.ends_with(",1")).count(), 2);
}

#[test]
fn summary_is_order_independent_and_single_run_std_zero() {
    let c = ModelConfig::new(Arch::Tri, 512, 0.5, BranchKind::Small, 0).unwrap();
    let recs = vec![fake_record(&c, 0, 1, 0.5, 0.7)];
    assert_eq!(summarize(&recs).unwrap().configs[0].test.f1_std, 0.0);

    let d = ModelConfig::new(Arch::Di, 2048, 0.3, BranchKind::Small, 0).unwrap();
    let mut recs = vec![
        fake_record(&c, 0, 1, 0.5, 0.7),
        fake_record(&d, 0, 1, 0.4, 0.1),
        fake_record(&c, 1, 2, 0.9, 0.3),
        fake_record(&d, 1, 2, 0.6, 0.2),
    ];
    let a = summarize(&recs).unwrap();
    recs.reverse();
    assert_eq!(a, summarize(&recs).unwrap());
}

#[test]
fn grid_determinism_on_real_training() {
    let spec = GridSpec {
        archs: vec![Arch::Mono],
        fc: vec![512],
        dropout: vec![0.3],
        runs_per_config: 2,
        ..GridSpec::full(BranchKind::Small, 5, config(2, 4))
    };
    let features: BTreeMap<Arch, SplitFeatures> = [(Arch::Mono, split(64))].into();
    let run = || {
        let (recs, summary) = run_grid(&spec, &features).unwrap();
        (
            recs.iter()
                .map(RunRecord::without_timing)
                .collect::<Vec<_>>(),
            summary,
        )
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_ne!(a[0].run_seed, a[1].run_seed);
}
