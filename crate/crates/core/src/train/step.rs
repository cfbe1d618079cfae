use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use super::{HceLoss, HclLoss, OptimizerConfig, TrainConfig};
use crate::backbone::{Bound, ForwardStats, StagedBackbone, NUM_STAGES};
use crate::error::{Error, Result};
use crate::hcl;
use crate::hce;
use crate::losses::{self, LossReport, LossTerms};
use crate::nn::{self, Rect, DEFAULT_SAMPLES_PER_BIN};
use crate::tensor::{Tape, Tensor, Var};

/// Pixel offset applied to [0, 1] images before they enter the network.
pub const INPUT_SHIFT: f64 = 0.5;
pub const INPUT_SCALE: f64 = 0.2;

/// Stacks C×H×W images in [0, 1] into a centred, roughly unit-variance
/// N×C×H×W network input.
pub fn network_input(images: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::stack(images)?.map(|v| (v - INPUT_SHIFT) / INPUT_SCALE))
}

pub fn hflip(image: &Tensor) -> Tensor {
    let w = *image.shape().last().expect("image has a width");
    let mut out = image.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(image.data().chunks(w)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Randomness consumed inside a step, one stream per purpose so switching a
/// branch off leaves every other draw unchanged.
#[derive(Clone, Debug)]
pub struct StepRngs {
    pub shuffle: ChaCha8Rng,
    pub mixup: ChaCha8Rng,
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: v ← μv + g + λp, p ← p − lr·v.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &StagedBackbone, config: &OptimizerConfig) -> Self {
        Sgd {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut StagedBackbone, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((param, grad), vel) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let p = param.value.data_mut();
            for ((p, &g), v) in p.iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

pub struct StepGradients {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
    pub stats: ForwardStats,
}

fn mixed_batch(batch: &Batch, num_classes: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor>, Tensor)> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup_alpha {alpha}: {e}")))?;
    let n = batch.len();
    let mut images = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n * num_classes);
    for i in 0..n {
        let j = rng.gen_range(0..n);
        let lambda = beta.sample(rng);
        let (img, soft) = hcl::mixup(
            &batch.images[i],
            &batch.images[j],
            batch.labels[i],
            batch.labels[j],
            num_classes,
            lambda,
        )?;
        images.push(img);
        targets.extend(soft);
    }
    Ok((images, Tensor::new(vec![n, num_classes], targets)?))
}

/// Records the weighted training objective for `batch` on `tape`.
pub fn build_loss(
    tape: &mut Tape,
    bound: &mut Bound<'_>,
    batch: &Batch,
    config: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<(Var, LossReport)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let model = bound.model();
    let k = model.num_classes();
    let (stride, fs) = (model.config().total_stride(), model.config().feature_size());

    let (inputs, soft_targets) = if config.mixup_baseline {
        let (imgs, t) = mixed_batch(batch, k, config.mixup_alpha, &mut rngs.mixup)?;
        (imgs, Some(t))
    } else {
        (batch.images.clone(), None)
    };
    let x = tape.constant(network_input(&inputs)?);
    let features = bound.forward_full(tape, x)?;
    let logits = bound.head_logits(tape, NUM_STAGES, features)?;
    let logprobs = nn::log_softmax(tape, logits)?;
    let cls = match &soft_targets {
        Some(t) => losses::soft_cls_loss(tape, logprobs, t)?,
        None => losses::cls_loss(tape, logprobs, &batch.labels)?,
    };

    let mut terms = LossTerms {
        cls,
        hor: None,
        exp: None,
        confidences: Vec::new(),
    };

    if config.hcl_active() {
        let schedule = hcl::granularity_schedule(config.m, NUM_STAGES)?;
        let sets = batch
            .images
            .iter()
            .map(|img| hcl::augment("", img, config.sigma, &schedule, config.independent_regions, &mut rngs.shuffle))
            .collect::<Result<Vec<_>>>()?;
        let mut ordered = Vec::with_capacity(schedule.len());
        for (e, entry) in schedule.iter().enumerate() {
            let shuffled: Vec<Tensor> = sets.iter().map(|s| s.entries[e].image.clone()).collect();
            let xe = tape.constant(network_input(&shuffled)?);
            let fe = bound.forward_truncated(tape, xe, entry.last_stage)?;
            ordered.push(bound.head_logits(tape, entry.last_stage, fe)?);
        }
        let out = match config.hcl_loss {
            HclLoss::Hor => losses::hor_loss(tape, &ordered, &batch.labels, config.ordering_mode)?,
            HclLoss::Ce => losses::granularity_ce_loss(tape, &ordered, &batch.labels)?,
        };
        terms.hor = Some(out.loss);
        terms.confidences = out.confidences;
    }

    if config.hce_active() {
        let sigma_v = hce::view_sigma(config.sigma);
        let mut views = Vec::with_capacity(4 * batch.len());
        let mut boxes: Vec<[Rect; 4]> = Vec::with_capacity(batch.len());
        for img in &batch.images {
            let set = hce::extract_views(img, sigma_v)?;
            for v in 0..4 {
                views.push(set.views.index_axis0(v)?);
            }
            boxes.push(set.boxes);
        }
        let xv = tape.constant(network_input(&views)?);
        let local = hce::local_features(bound, tape, xv, config.hce_mode)?;
        let exp = match config.hce_loss {
            HceLoss::Exp => {
                let global = hce::global_features_batched(
                    tape,
                    features,
                    &boxes,
                    stride,
                    fs,
                    fs,
                    DEFAULT_SAMPLES_PER_BIN,
                )?;
                losses::exp_loss(tape, global, local)?
            }
            HceLoss::Ce => {
                let view_logits = bound.head_logits(tape, NUM_STAGES, local)?;
                let lp = nn::log_softmax(tape, view_logits)?;
                let labels: Vec<usize> = batch.labels.iter().flat_map(|&l| [l; 4]).collect();
                losses::cls_loss(tape, lp, &labels)?
            }
        };
        terms.exp = Some(exp);
    }

    losses::total_loss(tape, &terms, &config.effective_weights())
}

/// Forward and backward for one batch; parameters are left untouched.
pub fn compute_gradients(
    model: &StagedBackbone,
    batch: &Batch,
    config: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<StepGradients> {
    let mut tape = Tape::new();
    let mut bound = model.bind(&mut tape, true);
    let (total, report) = build_loss(&mut tape, &mut bound, batch, config, rngs)?;
    let mut grads = tape.backward(total)?;
    let stats = bound.stats();
    let grads = bound.collect_grads(&mut grads);
    Ok(StepGradients { report, grads, stats })
}


/// One optimisation step on `batch`.
pub fn train_step(
    model: &mut StagedBackbone,
    optimizer: &mut Sgd,
    batch: &Batch,
    config: &TrainConfig,
    rngs: &mut StepRngs,
    lr: f64,
) -> Result<(LossReport, ForwardStats)> {
    let step = compute_gradients(model, batch, config, rngs)?;
    optimizer.step(model, &step.grads, lr)?;
    Ok((step.report, step.stats))
}
