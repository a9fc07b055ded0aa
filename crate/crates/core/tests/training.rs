//! Training loop behaviour on small synthetic problems.

use ekgnet::checkpoint::Checkpoint;
use ekgnet::densenet::{ArchConfig, EkgNet};
use ekgnet::experiment::{evaluate_checkpoint, prepare, restore, run, RunSpec};
use ekgnet::hsi::{synthesize_dataset, HsiCube, Split, SplitRatios, SynthParams};
use ekgnet::optim::{Adam, AdamConfig};
use ekgnet::params::{ParamKind, ParamStore};
use ekgnet::train::{evaluate, train, train_step, TrainConfig};

fn small_cube(seed: u64) -> HsiCube {
    synthesize_dataset(&SynthParams {
        height: 14,
        width: 14,
        bands: 12,
        seed,
        ..SynthParams::default()
    })
    .unwrap()
    .cube
}

fn small_spec(epochs: usize, seed: u64) -> RunSpec {
    RunSpec {
        arch: ArchConfig::new(vec![1, 1], 4, 3, 5, 12),
        train: TrainConfig {
            epochs,
            batch_size: 8,
            ..TrainConfig::default()
        },
        ratios: SplitRatios([6, 1, 3]),
        seed,
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cube = small_cube(1);
    let (ds, _) = prepare(&cube, 5, SplitRatios([6, 1, 3]), 1, None).unwrap();
    let arch = ArchConfig::new(vec![1, 1], 4, 3, 5, 12);
    let mut store = ParamStore::<f64>::new();
    let model = EkgNet::build(&arch, &mut store, 1).unwrap();
    let before = store.clone();
    let cfg = AdamConfig {
        lr: 0.0,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(&store, cfg).unwrap();
    let idx = ds.indices(Split::Train);
    for chunk in idx.chunks(8).take(3) {
        let (loss, _) = train_step(&model, &mut store, &mut adam, &ds, chunk).unwrap();
        assert!(loss.is_finite());
    }
    assert_eq!(adam.steps(), 3);
    for (a, b) in before.entries().iter().zip(store.entries()) {
        if a.kind == ParamKind::Trainable {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{} moved", a.name);
        }
    }
}

#[test]
fn retained_parameters_are_the_best_validation_epoch() {
    let cube = small_cube(2);
    let spec = small_spec(6, 2);
    let (ds, _) = prepare(&cube, 5, spec.ratios, spec.seed, None).unwrap();
    let mut store = ParamStore::<f32>::new();
    let model = EkgNet::build(&spec.arch, &mut store, spec.init_seed()).unwrap();
    let outcome = train(&model, &mut store, &ds, &spec.train).unwrap();
    let vals: Vec<f64> = outcome.log.iter().map(|r| r.val_oa.unwrap()).collect();
    let best = outcome.best_val_oa.unwrap();
    assert!(vals.iter().all(|&v| v <= best));
    assert!(best >= *vals.last().unwrap());
    // The earliest epoch attaining the maximum is kept.
    let first_max = vals.iter().position(|&v| v == best).unwrap();
    assert_eq!(outcome.best_epoch, first_max);
    let mut kept = outcome.best.clone();
    let ev = evaluate(&model, &mut kept, &ds, &ds.indices(Split::Val), 8).unwrap();
    assert_eq!(ev.accuracy(), best);
}

#[test]
fn patience_stops_training_early() {
    let cube = small_cube(3);
    let mut spec = small_spec(40, 3);
    spec.train.patience = Some(1);
    let (ds, _) = prepare(&cube, 5, spec.ratios, spec.seed, None).unwrap();
    let mut store = ParamStore::<f32>::new();
    let model = EkgNet::build(&spec.arch, &mut store, spec.init_seed()).unwrap();
    let outcome = train(&model, &mut store, &ds, &spec.train).unwrap();
    if outcome.stopped_early {
        assert!(outcome.log.len() < 40);
        assert_eq!(outcome.log.len(), outcome.best_epoch + 2);
    } else {
        assert_eq!(outcome.log.len(), 40);
    }
}

#[test]
fn log_records_the_annealed_temperature() {
    let cube = small_cube(4);
    let out = run::<f32>(&cube, &small_spec(3, 4)).unwrap();
    let taus: Vec<f64> = out.log.iter().map(|r| r.tau).collect();
    assert_eq!(taus.len(), 3);
    assert_eq!(taus[0], 30.0);
    assert!(taus[1] < taus[0] && taus[2] < taus[1]);
    assert!(out
        .log
        .iter()
        .all(|r| r.train_loss.is_finite() && r.val_loss.is_some()));
}

#[test]
fn seeds_change_the_run() {
    let cube = small_cube(5);
    let a = run::<f32>(&cube, &small_spec(2, 5)).unwrap();
    let b = run::<f32>(&cube, &small_spec(2, 6)).unwrap();
    assert_ne!(a.log, b.log);
    assert_eq!(a.report.seed, 5);
    assert_eq!(a.report.config["seed"], "5");
}

#[test]
fn checkpoint_reproduces_test_metrics() {
    let cube = small_cube(7);
    let out = run::<f32>(&cube, &small_spec(3, 7)).unwrap();
    let bytes = out.checkpoint().to_bytes().unwrap();
    let ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut restored = restore(&ck).unwrap();
    assert_eq!(restored.spec.seed, 7);
    let report = evaluate_checkpoint(&mut restored, &cube).unwrap();
    assert_eq!(report.confusion, out.report.confusion);
    assert_eq!(report.metrics(), out.report.metrics());
    assert_eq!(report.per_class_accuracy, out.report.per_class_accuracy);
    assert_eq!(report.test_loss.to_bits(), out.report.test_loss.to_bits());

    let fewer_bands = synthesize_dataset(&SynthParams {
        height: 14,
        width: 14,
        bands: 10,
        seed: 7,
        ..SynthParams::default()
    })
    .unwrap()
    .cube;
    let err = evaluate_checkpoint(&mut restored, &fewer_bands)
        .unwrap_err()
        .to_string();
    assert!(err.contains("12") && err.contains("10"), "{err}");
}

#[test]
fn checkpoint_restores_the_run_specification() {
    let cube = small_cube(8);
    let mut spec = small_spec(1, 8);
    spec.train.adam.lr = 5e-4;
    spec.train.patience = Some(4);
    // The run seed drives the batch order.
    spec.train.seed = spec.seed;
    let out = run::<f64>(&cube, &spec).unwrap();
    let ck = Checkpoint::<f64>::from_bytes(&out.checkpoint().to_bytes().unwrap()).unwrap();
    assert_eq!(restore(&ck).unwrap().spec, spec);
}
