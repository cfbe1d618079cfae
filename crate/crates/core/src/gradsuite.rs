//! Finite-difference checks of every differentiable operation and of the
//! full training objective, each at several random points.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Param, StagedBackbone};
use crate::error::Result;
use crate::losses::{self, LossTerms, LossWeights, OrderingMode};
use crate::nn::{self, Rect, Roi};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::train::{build_loss, ArchConfig, Batch, StepRngs, TrainConfig};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && self.checked > 0
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Σ out ⊙ r, so every output coordinate carries a distinct weight.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(out, rv)?;
    Ok(tape.sum_all(p))
}

type Case = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// A fresh (function, point) pair for one trial.
type Suite = fn(&mut ChaCha8Rng) -> (Case, Tensor);

fn conv_input(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let w = random(&[4, 3, 3, 3], 0.5, rng);
    let b = random(&[4], 0.5, rng);
    let r = random(&[2, 4, 3, 3], 1.0, rng);
    let f: Case = Box::new(move |tape, x| {
        let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let y = nn::conv2d(tape, x, wv, bv, 2, 1)?;
        project(tape, y, &r)
    });
    (f, random(&[2, 3, 5, 5], 1.0, rng))
}

fn conv_weight(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let x = random(&[2, 3, 5, 5], 1.0, rng);
    let b = random(&[4], 0.5, rng);
    let r = random(&[2, 4, 5, 5], 1.0, rng);
    let f: Case = Box::new(move |tape, w| {
        let (xv, bv) = (tape.constant(x.clone()), tape.constant(b.clone()));
        let y = nn::conv2d(tape, xv, w, bv, 1, 1)?;
        project(tape, y, &r)
    });
    (f, random(&[4, 3, 3, 3], 0.5, rng))
}

fn linear_input(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let w = random(&[4, 5], 1.0, rng);
    let b = random(&[5], 1.0, rng);
    let r = random(&[3, 5], 1.0, rng);
    let f: Case = Box::new(move |tape, x| {
        let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let y = nn::linear(tape, x, wv, bv)?;
        project(tape, y, &r)
    });
    (f, random(&[3, 4], 1.0, rng))
}

fn linear_weight(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let x = random(&[3, 4], 1.0, rng);
    let b = random(&[5], 1.0, rng);
    let r = random(&[3, 5], 1.0, rng);
    let f: Case = Box::new(move |tape, w| {
        let (xv, bv) = (tape.constant(x.clone()), tape.constant(b.clone()));
        let y = nn::linear(tape, xv, w, bv)?;
        project(tape, y, &r)
    });
    (f, random(&[4, 5], 1.0, rng))
}

fn log_softmax(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let r = random(&[3, 6], 1.0, rng);
    let f: Case = Box::new(move |tape, x| {
        let y = nn::log_softmax(tape, x)?;
        project(tape, y, &r)
    });
    (f, random(&[3, 6], 3.0, rng))
}

fn bilinear_resize(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let r = random(&[2, 2, 9, 4], 1.0, rng);
    let f: Case = Box::new(move |tape, x| {
        let y = nn::bilinear_resize(tape, x, 9, 4)?;
        project(tape, y, &r)
    });
    (f, random(&[2, 2, 5, 7], 1.0, rng))
}

fn roi_align(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let rois: Vec<Roi> = (0..3)
        .map(|i| {
            let x0 = rng.gen_range(0.0..3.0);
            let y0 = rng.gen_range(0.0..3.0);
            Roi {
                batch: i % 2,
                rect: Rect::new(x0, y0, x0 + rng.gen_range(0.5..3.0), y0 + rng.gen_range(0.5..3.0)),
            }
        })
        .collect();
    let r = random(&[3, 2, 3, 3], 1.0, rng);
    let f: Case = Box::new(move |tape, x| {
        let y = nn::roi_align_batched(tape, x, &rois, 3, 3, 2)?;
        project(tape, y, &r)
    });
    (f, random(&[2, 2, 6, 6], 1.0, rng))
}

fn cls_loss(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let f: Case = Box::new(move |tape, x| {
        let lp = nn::log_softmax(tape, x)?;
        losses::cls_loss(tape, lp, &labels)
    });
    (f, random(&[4, 5], 2.0, rng))
}

fn hor_case(rng: &mut ChaCha8Rng, mode: OrderingMode) -> (Case, Tensor) {
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..4)).collect();
    let f: Case = Box::new(move |tape, x| {
        let parts = (0..3)
            .map(|g| tape.slice_rows(x, 2 * g, 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses::hor_loss(tape, &parts, &labels, mode)?.loss)
    });
    (f, random(&[6, 4], 2.0, rng))
}

fn hor_hinge(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    hor_case(rng, OrderingMode::Hinge)
}

fn hor_raw(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    hor_case(rng, OrderingMode::Raw)
}

fn exp_loss(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let local = random(&[8, 3, 2, 2], 1.0, rng);
    let f: Case = Box::new(move |tape, x| {
        let l = tape.constant(local.clone());
        losses::exp_loss(tape, x, l)
    });
    (f, random(&[8, 3, 2, 2], 1.0, rng))
}

fn total_loss(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let local = random(&[4, 3, 1, 1], 1.0, rng);
    let weights = LossWeights {
        alpha: rng.gen_range(0.5..2.0),
        beta: rng.gen_range(0.5..2.0),
        gamma: rng.gen_range(0.5..2.0),
    };
    let f: Case = Box::new(move |tape, x| {
        let lp = nn::log_softmax(tape, x)?;
        let cls = losses::cls_loss(tape, lp, &labels)?;
        let scaled = tape.mul_scalar(x, 0.5);
        let hor = losses::hor_loss(tape, &[scaled, x], &labels, OrderingMode::Hinge)?.loss;
        let g = tape.reshape(x, &[4, 3, 1, 1])?;
        let l = tape.constant(local.clone());
        let exp = losses::exp_loss(tape, g, l)?;
        let terms = LossTerms {
            cls,
            hor: Some(hor),
            exp: Some(exp),
            confidences: vec![],
        };
        Ok(losses::total_loss(tape, &terms, &weights)?.0)
    });
    (f, random(&[4, 3], 2.0, rng))
}

/// The whole training objective (main, shuffled and view branches) of a
/// small network, differentiated with respect to one parameter array.
fn composite(rng: &mut ChaCha8Rng, param_name: &'static str) -> (Case, Tensor) {
    let config = TrainConfig {
        image_size: 16,
        backbone: ArchConfig {
            stage_channels: vec![2, 3, 3, 4],
            blocks_per_stage: 1,
        },
        seed: rng.gen(),
        ..TrainConfig::default()
    };
    let model = StagedBackbone::init(&config.model_config(3)).unwrap();
    let index = model.params().iter().position(|p: &Param| p.name == param_name).unwrap();
    let point = model.params()[index].value.clone();
    let batch = Batch {
        images: (0..2).map(|_| random(&[3, 16, 16], 0.5, rng).map(|v| v + 0.5)).collect(),
        labels: vec![rng.gen_range(0..3), rng.gen_range(0..3)],
    };
    let rngs = StepRngs {
        shuffle: ChaCha8Rng::seed_from_u64(rng.gen()),
        mixup: ChaCha8Rng::seed_from_u64(rng.gen()),
    };
    let f: Case = Box::new(move |tape, x| {
        let mut bound = model.bind(tape, true);
        bound.substitute(index, x)?;
        let mut rngs = rngs.clone();
        Ok(build_loss(tape, &mut bound, &batch, &config, &mut rngs)?.0)
    });
    (f, point)
}

fn composite_stem(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    composite(rng, "stage1.conv1.weight")
}

fn composite_deep(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    composite(rng, "stage3.conv1.weight")
}

fn composite_head(rng: &mut ChaCha8Rng) -> (Case, Tensor) {
    composite(rng, "stage2.head.weight")
}

pub const SUITES: &[(&str, Suite)] = &[
    ("conv2d.input", conv_input),
    ("conv2d.weight", conv_weight),
    ("linear.input", linear_input),
    ("linear.weight", linear_weight),
    ("log_softmax", log_softmax),
    ("bilinear_resize", bilinear_resize),
    ("roi_align", roi_align),
    ("cls_loss", cls_loss),
    ("hor_loss.hinge", hor_hinge),
    ("hor_loss.raw", hor_raw),
    ("exp_loss", exp_loss),
    ("total_loss", total_loss),
    ("composite.stage1_conv", composite_stem),
    ("composite.stage3_conv", composite_deep),
    ("composite.stage2_head", composite_head),
];

/// Runs every suite at `points` random points.
pub fn run_all(points: usize, epsilon: f64, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::with_capacity(SUITES.len());
    for (i, (name, suite)) in SUITES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let start = Instant::now();
        let mut result = SuiteResult {
            name: name.to_string(),
            points,
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
            seconds: 0.0,
        };
        for _ in 0..points {
            let (f, x) = suite(&mut rng);
            let report = grad_check(f, &x, epsilon)?;
            result.max_rel_error = result.max_rel_error.max(report.max_rel_error);
            result.checked += report.checked;
            result.excluded += report.excluded;
        }
        result.seconds = start.elapsed().as_secs_f64();
        out.push(result);
    }
    Ok(out)
}
