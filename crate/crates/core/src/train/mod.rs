//! Training, evaluation and checkpointing.

mod ablate;
mod checkpoint;
mod config;
mod step;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, ablation_plan, AblationConfig, AblationRow, AblationTable, RowResult};
pub use checkpoint::{Checkpoint, ParamEntry, FORMAT_VERSION, MAGIC};
pub use config::{apply_overrides, set_key, ArchConfig, HceLoss, HclLoss, OptimizerConfig, TrainConfig};
pub use step::{build_loss, compute_gradients, hflip, network_input, train_step, Batch, Sgd, StepGradients, StepRngs, INPUT_SCALE, INPUT_SHIFT};

use crate::backbone::{ForwardStats, StagedBackbone, NUM_STAGES};
use crate::data::{self, Dataset, Split, SplitData};
use crate::error::{Error, Result};
use crate::tensor::Tape;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
const EVAL_BATCH: usize = 32;

/// RNG stream ids derived from the run seed.
mod stream {
    pub const ORDER: u64 = 1;
    pub const FLIP: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const MIXUP: u64 = 4;
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One line of the metrics file. Losses are epoch means over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    pub hor: f64,
    pub exp: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub label: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub stats: ForwardStats,
}

/// Index of the largest entry, lowest index on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Final-head logits for each image; no augmentation, no auxiliary branch.
pub fn predict(model: &StagedBackbone, images: &[crate::tensor::Tensor]) -> Result<(Vec<usize>, ForwardStats)> {
    let mut preds = Vec::with_capacity(images.len());
    let mut stats = ForwardStats::default();
    let k = model.num_classes();
    for chunk in images.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let mut bound = model.bind(&mut tape, false);
        let x = tape.constant(network_input(chunk)?);
        let f = bound.forward_full(&mut tape, x)?;
        let logits = bound.head_logits(&mut tape, NUM_STAGES, f)?;
        preds.extend(tape.value(logits).data().chunks(k).map(argmax));
        stats.merge(&bound.stats());
    }
    Ok((preds, stats))
}

pub fn evaluate_split(model: &StagedBackbone, split: &SplitData) -> Result<EvalReport> {
    let k = model.num_classes();
    if let Some(&bad) = split.labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} exceeds the model's {k} classes")));
    }
    let (preds, stats) = predict(model, &split.images)?;
    let mut per_class: Vec<ClassAccuracy> = (0..k)
        .map(|label| ClassAccuracy {
            label,
            correct: 0,
            total: 0,
        })
        .collect();
    for (&p, &y) in preds.iter().zip(&split.labels) {
        per_class[y].total += 1;
        per_class[y].correct += (p == y) as usize;
    }
    let correct = per_class.iter().map(|c| c.correct).sum();
    let total = split.len();
    Ok(EvalReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_class,
        stats,
    })
}

/// Loads a checkpoint and scores one split of a dataset.
pub fn evaluate(checkpoint: &Path, dataset: &Path, split: Split) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = data::load(dataset)?;
    if ds.num_classes != ck.backbone.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint was trained for {}",
            ds.num_classes, ck.backbone.num_classes
        )));
    }
    if ds.image_size != ck.backbone.input_size {
        return Err(Error::Config(format!(
            "dataset images are {} px, checkpoint expects {}",
            ds.image_size, ck.backbone.input_size
        )));
    }
    evaluate_split(&ck.model()?, ds.split(split))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    pub stats: ForwardStats,
    pub model: StagedBackbone,
    pub output: PathBuf,
}

/// Everything a training run needs besides its config.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub dataset: &'d Dataset,
}

impl Trainer<'_> {
    /// Runs every epoch, appending metrics and writing `final.ckpt` and
    /// `best.ckpt` (highest test accuracy, earliest on ties) under
    /// `config.output`.
    pub fn run(&self) -> Result<TrainOutcome> {
        let config = &self.config;
        config.validate()?;
        let ds = self.dataset;
        if ds.image_size != config.image_size {
            return Err(Error::Config(format!(
                "dataset images are {} px but image_size is {}",
                ds.image_size, config.image_size
            )));
        }
        if ds.train.is_empty() {
            return Err(Error::Config("dataset has no training images".into()));
        }
        let out = &config.output;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let metrics_path = out.join(METRICS_FILE);
        let mut metrics_file =
            BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);

        let mut model = StagedBackbone::init(&config.model_config(ds.num_classes))?;
        let mut optimizer = Sgd::new(&model, &config.optimizer);
        let mut order_rng = rng_stream(config.seed, stream::ORDER);
        let mut flip_rng = rng_stream(config.seed, stream::FLIP);
        let mut rngs = StepRngs {
            shuffle: rng_stream(config.seed, stream::SHUFFLE),
            mixup: rng_stream(config.seed, stream::MIXUP),
        };

        let mut history = Vec::with_capacity(config.epochs);
        let mut stats = ForwardStats::default();
        let mut best: Option<(usize, f64)> = None;
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        for epoch in 0..config.epochs {
            let lr = config.optimizer.lr_at(epoch);
            let epoch_config = config.for_epoch(epoch);
            order.shuffle(&mut order_rng);
            let mut sums = [0.0; 4];
            for chunk in order.chunks(config.batch_size) {
                let batch = Batch {
                    images: chunk
                        .iter()
                        .map(|&i| {
                            let img = &ds.train.images[i];
                            if config.hflip && flip_rng.gen_bool(0.5) {
                                hflip(img)
                            } else {
                                img.clone()
                            }
                        })
                        .collect(),
                    labels: chunk.iter().map(|&i| ds.train.labels[i]).collect(),
                };
                let (report, s) = train_step(&mut model, &mut optimizer, &batch, &epoch_config, &mut rngs, lr)?;
                stats.merge(&s);
                let n = batch.len() as f64;
                for (acc, v) in sums.iter_mut().zip([report.cls, report.hor, report.exp, report.total]) {
                    *acc += n * v;
                }
            }
            let n = ds.train.len() as f64;
            let train_acc = evaluate_split(&model, &ds.train)?.accuracy;
            let test_acc = evaluate_split(&model, &ds.test)?.accuracy;
            let record = EpochMetrics {
                epoch,
                lr,
                cls: sums[0] / n,
                hor: sums[1] / n,
                exp: sums[2] / n,
                total: sums[3] / n,
                train_acc,
                test_acc,
            };
            serde_json::to_writer(&mut metrics_file, &record)?;
            writeln!(metrics_file).map_err(|e| Error::io(&metrics_path, e))?;
            metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
            if best.map_or(true, |(_, acc)| test_acc > acc) {
                best = Some((epoch, test_acc));
                Checkpoint::new(&model, config, epoch, Some(record.clone())).save(&out.join(BEST_CHECKPOINT))?;
            }
            history.push(record);
        }
        let last = history.last().cloned();
        Checkpoint::new(&model, config, config.epochs - 1, last.clone()).save(&out.join(FINAL_CHECKPOINT))?;
        let (best_epoch, best_test_acc) = best.expect("at least one epoch");
        Ok(TrainOutcome {
            best_epoch,
            best_test_acc,
            final_test_acc: last.map(|m| m.test_acc).unwrap_or(0.0),
            metrics: history,
            stats,
            model,
            output: out.clone(),
        })
    }
}

/// Loads `config.dataset` and trains on it.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let dataset = data::load(&config.dataset)?;
    Trainer {
        config: config.clone(),
        dataset: &dataset,
    }
    .run()
}
