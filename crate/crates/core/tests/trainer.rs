use std::fs;

use newsbench::corpus::synthetic::{keyword_corpus, SyntheticConfig};
use newsbench::corpus::{split, DEFAULT_RATIOS};
use newsbench::model::{Mode, ModelConfig, ModelState};
use newsbench::pipeline::{prepare, Prepared};
use newsbench::trainer::{
    adamw_step, epoch_dir_name, load_checkpoint, train, OptimizerState, TrainConfig, TrainData, TrainError,
    TrainOptions, TrainOutcome, BEST_DIR, HISTORY_FILE,
};

fn data(per_class: usize) -> Prepared {
    let ds = keyword_corpus(&SyntheticConfig {
        classes: 3,
        per_class,
        body_words: (4, 8),
        ..Default::default()
    });
    let s = split(&ds, 3, DEFAULT_RATIOS, true).unwrap();
    prepare(&ds, &s, None, 64, 16).unwrap()
}

fn small_model(p: &Prepared, dropout_rate: f64) -> ModelState<f32> {
    let cfg = ModelConfig {
        vocab_size: p.vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_len: 16,
        n_classes: p.labels.len(),
        dropout_rate,
        ..Default::default()
    };
    ModelState::init(&cfg, 11).unwrap()
}

fn run(p: &Prepared, config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    let d = TrainData {
        train: &p.train,
        validation: &p.validation,
        labels: &p.labels,
    };
    train(small_model(p, 0.1), &d, config, options, |_| {})
}

#[test]
fn memorizes_twenty_examples_within_200_steps() {
    let p = data(14);
    let batch = p.train.select(&(0..20).collect::<Vec<_>>());
    let mut model = small_model(&p, 0.0);
    let mut params = model.params().clone();
    let mut opt = OptimizerState::new(&params);
    let cfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut reached = None;
    for step in 1..=200 {
        model = ModelState::from_params(model.config().clone(), params.clone()).unwrap();
        let (loss, grads) = model.loss_and_gradients(&batch, Mode::Eval, None).unwrap();
        if loss < 0.1 {
            reached = Some(step);
            break;
        }
        adamw_step(&mut params, &grads, &mut opt, &cfg).unwrap();
    }
    assert!(reached.is_some(), "loss stayed above 0.1 for 200 steps");
}

#[test]
fn same_seed_gives_identical_best_checkpoint() {
    let p = data(10);
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        max_epochs: 3,
        seed: 5,
        ..Default::default()
    };
    let a = run(&p, &cfg, &TrainOptions::default()).unwrap();
    let b = run(&p, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.history, b.history);
    let c = run(&p, &TrainConfig { seed: 6, ..cfg.clone() }, &TrainOptions::default()).unwrap();
    assert_ne!(a.best.model, c.best.model);
}

#[test]
fn flat_validation_f1_stops_after_patience() {
    let p = data(10);
    let cfg = TrainConfig {
        lr: 1e-12,
        weight_decay: 0.0,
        max_epochs: 50,
        ..Default::default()
    };
    let out = run(&p, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(out.history.best_epoch, 1);
    assert_eq!(out.history.stopped_epoch, 6);
    assert!(out.history.early_stopped);
    assert_eq!(out.best.epoch, 1);
}

#[test]
fn writes_every_epoch_and_resumes_exactly() {
    let p = data(10);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 4,
        seed: 2,
        ..Default::default()
    };
    let options = TrainOptions {
        run_dir: Some(dir.path().to_owned()),
        ..Default::default()
    };
    let first = run(&p, &cfg, &options).unwrap();
    for e in 1..=4 {
        let ck = load_checkpoint(dir.path().join(epoch_dir_name(e))).unwrap();
        assert_eq!(ck.epoch, e);
        assert!(ck.optimizer.is_some());
    }
    let best = load_checkpoint(dir.path().join(BEST_DIR)).unwrap();
    assert_eq!(best.model, first.best.model);
    let history = fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 5);

    let longer = TrainConfig {
        max_epochs: 6,
        ..cfg.clone()
    };
    let resumed = run(
        &p,
        &longer,
        &TrainOptions {
            resume: true,
            ..options.clone()
        },
    )
    .unwrap();
    let fresh = run(&p, &longer, &TrainOptions::default()).unwrap();
    assert_eq!(resumed.history.records, fresh.history.records);
    assert_eq!(resumed.best.model, fresh.best.model);
    let last = load_checkpoint(dir.path().join(epoch_dir_name(6))).unwrap();
    let fresh_dir = tempfile::tempdir().unwrap();
    run(
        &p,
        &longer,
        &TrainOptions {
            run_dir: Some(fresh_dir.path().to_owned()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        last.model,
        load_checkpoint(fresh_dir.path().join(epoch_dir_name(6))).unwrap().model
    );
}

#[test]
fn fresh_run_discards_old_epochs() {
    let p = data(10);
    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        run_dir: Some(dir.path().to_owned()),
        ..Default::default()
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 3,
        ..Default::default()
    };
    run(&p, &cfg, &options).unwrap();
    run(&p, &TrainConfig { max_epochs: 2, ..cfg }, &options).unwrap();
    assert!(!dir.path().join(epoch_dir_name(3)).exists());
}

#[test]
fn checkpoint_write_failure_keeps_partial_history() {
    let p = data(10);
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".epoch_002.partial"), b"blocker").unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 5,
        ..Default::default()
    };
    let err = run(
        &p,
        &cfg,
        &TrainOptions {
            run_dir: Some(dir.path().to_owned()),
            ..Default::default()
        },
    )
    .err()
    .expect("second checkpoint cannot be written");
    match err {
        TrainError::Artifact { history, .. } => {
            assert_eq!(history.records.len(), 2);
            assert_eq!(history.records[0].epoch, 1);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let p = data(10);
    let empty = p.validation.select(&[]);
    let d = TrainData {
        train: &p.train,
        validation: &empty,
        labels: &p.labels,
    };
    let err = train(
        small_model(&p, 0.1),
        &d,
        &TrainConfig::default(),
        &TrainOptions::default(),
        |_| {},
    )
    .err()
    .unwrap();
    assert!(matches!(err, TrainError::EmptySplit("validation")));
}
