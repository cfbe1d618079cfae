mod common;

use std::fs;

use dhcnet::backbone::{StagedBackbone, NUM_STAGES};
use dhcnet::data::{self, Split, SplitData};
use dhcnet::hce::HceMode;
use dhcnet::losses;
use dhcnet::nn;
use dhcnet::tensor::{Tape, Tensor};
use dhcnet::train::{
    compute_gradients, evaluate, evaluate_split, network_input, train, Batch, Checkpoint, StepRngs, TrainConfig,
    BEST_CHECKPOINT, FINAL_CHECKPOINT, METRICS_FILE,
};
use dhcnet::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rngs(seed: u64) -> StepRngs {
    StepRngs {
        shuffle: ChaCha8Rng::seed_from_u64(seed),
        mixup: ChaCha8Rng::seed_from_u64(seed + 1),
    }
}

fn setup(classes: usize) -> (tempfile::TempDir, TrainConfig, StagedBackbone, Batch) {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = common::small_dataset(&dir.path().join("data"), classes, 2, 16, 3);
    let config = common::tiny_config(&ds_dir, &dir.path().join("run"));
    let ds = data::load(&ds_dir).unwrap();
    let model = StagedBackbone::init(&config.model_config(ds.num_classes)).unwrap();
    let batch = Batch {
        images: ds.train.images[..3].to_vec(),
        labels: ds.train.labels[..3].to_vec(),
    };
    (dir, config, model, batch)
}

#[test]
fn disabled_branches_give_the_cross_entropy_gradient() {
    let (_dir, mut config, model, batch) = setup(3);
    config.enable_hcl = false;
    config.enable_hce = false;
    let step = compute_gradients(&model, &batch, &config, &mut rngs(0)).unwrap();

    let mut tape = Tape::new();
    let mut bound = model.bind(&mut tape, true);
    let x = tape.constant(network_input(&batch.images).unwrap());
    let f = bound.forward_full(&mut tape, x).unwrap();
    let logits = bound.head_logits(&mut tape, NUM_STAGES, f).unwrap();
    let lp = nn::log_softmax(&mut tape, logits).unwrap();
    let ce = losses::cls_loss(&mut tape, lp, &batch.labels).unwrap();
    let scaled = tape.mul_scalar(ce, config.weights.alpha);
    let mut grads = tape.backward(scaled).unwrap();
    let want = bound.collect_grads(&mut grads);
    assert_eq!(step.grads, want);
    assert_eq!(step.report.hor, 0.0);
    assert_eq!(step.report.exp, 0.0);
}

#[test]
fn forward_passes_per_image_with_both_branches() {
    let (_dir, config, model, batch) = setup(3);
    let n = batch.len();
    let step = compute_gradients(&model, &batch, &config, &mut rngs(0)).unwrap();
    assert_eq!(step.stats.backbone_images(), n * (1 + config.m as usize + 4));
    assert_eq!(step.stats.full_forward_images, n * (1 + 1 + 4));
    assert_eq!(step.stats.truncated_forward_images, 2 * n);
    assert_eq!(step.stats.head_rows, [0, n, n, 2 * n]);
}

#[test]
fn mixup_replaces_both_branches() {
    let (_dir, mut config, model, batch) = setup(3);
    config.mixup_baseline = true;
    let step = compute_gradients(&model, &batch, &config, &mut rngs(0)).unwrap();
    assert_eq!(step.stats.backbone_images(), batch.len());
    assert_eq!((step.report.hor, step.report.exp), (0.0, 0.0));
}

#[test]
fn frozen_views_change_the_gradient_only_through_local_features() {
    let (_dir, mut config, model, batch) = setup(3);
    config.enable_hcl = false;
    let online = compute_gradients(&model, &batch, &config, &mut rngs(0)).unwrap();
    config.hce_mode = HceMode::Frozen;
    let frozen = compute_gradients(&model, &batch, &config, &mut rngs(0)).unwrap();
    assert_eq!(online.report, frozen.report);
    assert_ne!(online.grads, frozen.grads);
}

#[test]
fn identical_state_gives_identical_steps() {
    let (_dir, config, model, batch) = setup(3);
    let a = compute_gradients(&model, &batch, &config, &mut rngs(4)).unwrap();
    let b = compute_gradients(&model, &batch, &config, &mut rngs(4)).unwrap();
    assert_eq!(a.grads, b.grads);
    assert_eq!(a.report, b.report);
}

#[test]
fn zero_beta_matches_disabled_shuffle_branch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::small_dataset(&dir.path().join("data"), 3, 2, 16, 1);
    let mut a = common::tiny_config(&ds, &dir.path().join("a"));
    a.epochs = 3;
    a.weights.beta = 0.0;
    let mut b = a.clone();
    b.output = dir.path().join("b");
    b.enable_hcl = false;
    let (ra, rb) = (train(&a).unwrap(), train(&b).unwrap());
    for (pa, pb) in ra.model.params().iter().zip(rb.model.params()) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
    }
}

#[test]
fn metrics_schedule_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::small_dataset(&dir.path().join("data"), 3, 2, 16, 2);
    let mut config = common::tiny_config(&ds, &dir.path().join("run"));
    config.epochs = 7;
    let outcome = train(&config).unwrap();
    let text = fs::read_to_string(config.output.join(METRICS_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    let keys = ["epoch", "lr", "cls", "hor", "exp", "total", "train_acc", "test_acc"];
    for l in &lines {
        let obj = l.as_object().unwrap();
        assert_eq!(obj.len(), keys.len());
        assert!(keys.iter().all(|k| obj.contains_key(*k)));
    }
    assert_eq!(lines[4]["lr"].as_f64().unwrap(), config.optimizer.lr);
    assert_eq!(lines[5]["lr"].as_f64().unwrap(), 0.9 * config.optimizer.lr);
    assert_eq!(outcome.metrics[6].lr, config.optimizer.lr * 0.9);

    for name in [FINAL_CHECKPOINT, BEST_CHECKPOINT] {
        let bytes = fs::read(config.output.join(name)).unwrap();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
        assert_eq!(bytes, again, "{name}");
    }
    let ck = Checkpoint::load(&config.output.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(ck.epoch, outcome.best_epoch);
    let report = evaluate(&config.output.join(BEST_CHECKPOINT), &ds, Split::Test).unwrap();
    assert_eq!(report.accuracy, outcome.best_test_acc);
}

#[test]
fn single_threaded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::small_dataset(&dir.path().join("data"), 3, 2, 16, 4);
    let config = common::tiny_config(&ds, &dir.path().join("run"));
    let read = |name: &str| fs::read(config.output.join(name)).unwrap();
    train(&config).unwrap();
    let first = [read(METRICS_FILE), read(FINAL_CHECKPOINT), read(BEST_CHECKPOINT)];
    fs::remove_dir_all(&config.output).unwrap();
    train(&config).unwrap();
    let second = [read(METRICS_FILE), read(FINAL_CHECKPOINT), read(BEST_CHECKPOINT)];
    assert_eq!(first, second);
}

#[test]
fn inference_uses_only_the_full_forward_and_final_head() {
    let (_dir, config, model, batch) = setup(3);
    let split = SplitData {
        images: batch.images.clone(),
        labels: batch.labels.clone(),
    };
    let report = evaluate_split(&model, &split).unwrap();
    assert_eq!(report.stats.full_forward_images, batch.len());
    assert_eq!(report.stats.truncated_forward_images, 0);
    assert_eq!(report.stats.head_rows, [0, 0, 0, batch.len()]);
    assert_eq!(report.total, batch.len());
    let again = evaluate_split(&model, &split).unwrap();
    assert_eq!(report, again);
    let _ = config;
}

#[test]
fn memorised_single_class_scores_100_percent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::small_dataset(&dir.path().join("data"), 1, 2, 16, 0);
    let config = common::tiny_config(&ds, &dir.path().join("run"));
    train(&config).unwrap();
    let report = evaluate(&config.output.join(FINAL_CHECKPOINT), &ds, Split::Train).unwrap();
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn permuted_labels_score_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = common::small_dataset(&dir.path().join("data"), 4, 4, 16, 0);
    let mut config = common::tiny_config(&ds_dir, &dir.path().join("run"));
    config.epochs = 3;
    let outcome = train(&config).unwrap();
    let ds = data::load(&ds_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trials = 400;
    let mut total = 0.0;
    for _ in 0..trials {
        let mut mapping: Vec<usize> = (0..4).collect();
        mapping.shuffle(&mut rng);
        let split = SplitData {
            images: ds.test.images.clone(),
            labels: ds.test.labels.iter().map(|&l| mapping[l]).collect(),
        };
        total += evaluate_split(&outcome.model, &split).unwrap().accuracy;
    }
    let mean = total / trials as f64;
    assert!((mean - 0.25).abs() < 0.05, "mean accuracy {mean}");
}

#[test]
fn class_count_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds3 = common::small_dataset(&dir.path().join("d3"), 3, 1, 16, 0);
    let ds4 = common::small_dataset(&dir.path().join("d4"), 4, 1, 16, 0);
    let config = common::tiny_config(&ds3, &dir.path().join("run"));
    train(&config).unwrap();
    let err = evaluate(&config.output.join(FINAL_CHECKPOINT), &ds4, Split::Test).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let mut tape = Tape::new();
    let cls = tape.param(Tensor::scalar(f64::INFINITY));
    let terms = losses::LossTerms {
        cls,
        hor: None,
        exp: None,
        confidences: vec![],
    };
    match losses::total_loss(&mut tape, &terms, &Default::default()) {
        Err(Error::NonFiniteLoss { which, cls, .. }) => {
            assert_eq!(which, "classification");
            assert!(cls.is_infinite());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_roundtrips_through_json() {
    let mut c = TrainConfig::default();
    c.weights.gamma = 0.1 + 0.2;
    c.hce_mode = HceMode::Frozen;
    assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
}
