//! Bilinear resampling: image resize and RoIAlign.
//!
//! Both use the half-pixel-center convention: pixel `i` covers the continuous
//! interval `[i, i + 1)` and its value sits at `i + 0.5`. Sample positions
//! falling outside the plane are clamped to the border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Function, Tape, Tensor, Var};

/// Axis-aligned rectangle in continuous plane coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn scaled(&self, factor: f64) -> Rect {
        Rect::new(self.x0 * factor, self.y0 * factor, self.x1 * factor, self.y1 * factor)
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(self.x1 > self.x0 && self.y1 > self.y0) {
            return Err(Error::InvalidArgument(format!("degenerate box {self:?}")));
        }
        const TOL: f64 = 1e-9;
        if self.x0 < -TOL || self.y0 < -TOL || self.x1 > w as f64 + TOL || self.y1 > h as f64 + TOL {
            return Err(Error::InvalidArgument(format!("box {self:?} lies outside the {h}×{w} plane")));
        }
        Ok(())
    }
}

/// Bilinear tap along one axis: `(1 − w)·v[lo] + w·v[hi]`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f64,
}

impl Tap {
    /// Tap for continuous index-space coordinate `pos` on an axis of length `len`.
    fn at(pos: f64, len: usize) -> Tap {
        let pos = pos.clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        Tap { lo, hi, w: pos - lo as f64 }
    }
}

fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output).map(|d| Tap::at((d as f64 + 0.5) * scale - 0.5, input)).collect()
}

/// Separable resampling plan for one source plane: out[i][j] uses
/// `rows[i] × cols[j]` taps, averaged.
#[derive(Clone, Debug)]
struct Plan {
    rows: Vec<Vec<Tap>>,
    cols: Vec<Vec<Tap>>,
}

impl Plan {
    fn gather(&self, plane: &[f64], w: usize, out: &mut [f64]) {
        let ow = self.cols.len();
        for (i, ys) in self.rows.iter().enumerate() {
            for (j, xs) in self.cols.iter().enumerate() {
                out[i * ow + j] = cell_value(ys, xs, plane, w);
            }
        }
    }

    fn scatter(&self, grad: &[f64], w: usize, plane: &mut [f64]) {
        let ow = self.cols.len();
        for (i, ys) in self.rows.iter().enumerate() {
            let norm_y = 1.0 / ys.len() as f64;
            for (j, xs) in self.cols.iter().enumerate() {
                let g = grad[i * ow + j] * norm_y / xs.len() as f64;
                for ty in ys {
                    for tx in xs {
                        plane[ty.lo * w + tx.lo] += g * (1.0 - ty.w) * (1.0 - tx.w);
                        plane[ty.lo * w + tx.hi] += g * (1.0 - ty.w) * tx.w;
                        plane[ty.hi * w + tx.lo] += g * ty.w * (1.0 - tx.w);
                        plane[ty.hi * w + tx.hi] += g * ty.w * tx.w;
                    }
                }
            }
        }
    }
}

/// Mean of the bilinear samples at every (y, x) tap pair.
fn cell_value(ys: &[Tap], xs: &[Tap], plane: &[f64], w: usize) -> f64 {
    let mut acc = 0.0;
    for ty in ys {
        let r0 = &plane[ty.lo * w..ty.lo * w + w];
        let r1 = &plane[ty.hi * w..ty.hi * w + w];
        for tx in xs {
            let top = r0[tx.lo] * (1.0 - tx.w) + r0[tx.hi] * tx.w;
            let bot = r1[tx.lo] * (1.0 - tx.w) + r1[tx.hi] * tx.w;
            acc += top * (1.0 - ty.w) + bot * ty.w;
        }
    }
    acc / (ys.len() * xs.len()) as f64
}

// ---------------------------------------------------------------------------
// resize

fn check_nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .ok()
        .filter(|s: &[usize; 4]| s.iter().all(|&d| d > 0))
        .ok_or_else(|| Error::InvalidShape {
            op,
            msg: format!("expected non-empty N×C×H×W, got {shape:?}"),
        })
}

fn resize_plan(h: usize, w: usize, out_h: usize, out_w: usize) -> Plan {
    Plan {
        rows: resize_taps(h, out_h).into_iter().map(|t| vec![t]).collect(),
        cols: resize_taps(w, out_w).into_iter().map(|t| vec![t]).collect(),
    }
}

struct ResizeFn {
    plan: Plan,
}

impl Function for ResizeFn {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let [_, _, h, w] = x.shape().try_into().unwrap();
        let [_, _, oh, ow] = output.shape().try_into().unwrap();
        let mut gx = vec![0.0; x.len()];
        for (src, dst) in grad.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
            self.plan.scatter(src, w, dst);
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
    }
}

fn resize_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<(Tensor, Plan)> {
    let [n, c, h, w] = check_nchw("bilinear_resize", x.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1×1".into()));
    }
    let plan = resize_plan(h, w, out_h, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        plan.gather(src, w, dst);
    }
    Ok((Tensor::from_parts(vec![n, c, out_h, out_w], out), plan))
}

pub fn bilinear_resize(tape: &mut Tape, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let (value, plan) = resize_forward(tape.value(input), out_h, out_w)?;
    Ok(tape.record(&[input], value, ResizeFn { plan }))
}

pub fn bilinear_resize_values(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize_forward(input, out_h, out_w).map(|(t, _)| t)
}

// ---------------------------------------------------------------------------
// RoIAlign

/// A box on one item of a batched feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub rect: Rect,
}

fn roi_plan(rect: &Rect, h: usize, w: usize, out_h: usize, out_w: usize, samples: usize) -> Plan {
    let axis = |start: f64, extent: f64, bins: usize, len: usize| -> Vec<Vec<Tap>> {
        let bin = extent / bins as f64;
        (0..bins)
            .map(|b| {
                (0..samples)
                    .map(|s| {
                        let pos = start + bin * (b as f64 + (s as f64 + 0.5) / samples as f64);
                        // continuous coordinate → index space
                        Tap::at(pos - 0.5, len)
                    })
                    .collect()
            })
            .collect()
    };
    Plan {
        rows: axis(rect.y0, rect.height(), out_h, h),
        cols: axis(rect.x0, rect.width(), out_w, w),
    }
}

struct RoiAlignFn {
    rois: Vec<Roi>,
    plans: Vec<Plan>,
}

impl Function for RoiAlignFn {
    fn name(&self) -> &'static str {
        "roi_align"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let [_, c, h, w] = x.shape().try_into().unwrap();
        let [_, _, oh, ow] = output.shape().try_into().unwrap();
        let mut gx = vec![0.0; x.len()];
        for (r, (roi, plan)) in self.rois.iter().zip(&self.plans).enumerate() {
            for ch in 0..c {
                let g = &grad.data()[((r * c + ch) * oh) * ow..((r * c + ch + 1) * oh) * ow];
                let base = (roi.batch * c + ch) * h * w;
                plan.scatter(g, w, &mut gx[base..base + h * w]);
            }
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
    }
}

fn roi_forward(
    feat: &Tensor,
    rois: &[Roi],
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<(Tensor, Vec<Plan>)> {
    let [n, c, h, w] = check_nchw("roi_align", feat.shape())?;
    if samples_per_bin == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "roi_align needs samples_per_bin ≥ 1 and a non-empty output grid".into(),
        ));
    }
    let mut plans = Vec::with_capacity(rois.len());
    let mut out = vec![0.0; rois.len() * c * out_h * out_w];
    for (r, roi) in rois.iter().enumerate() {
        if roi.batch >= n {
            return Err(Error::InvalidArgument(format!("roi batch index {} ≥ batch size {n}", roi.batch)));
        }
        roi.rect.validate(h, w)?;
        let plan = roi_plan(&roi.rect, h, w, out_h, out_w, samples_per_bin);
        for ch in 0..c {
            let src = &feat.data()[(roi.batch * c + ch) * h * w..(roi.batch * c + ch + 1) * h * w];
            let dst = &mut out[(r * c + ch) * out_h * out_w..(r * c + ch + 1) * out_h * out_w];
            plan.gather(src, w, dst);
        }
        plans.push(plan);
    }
    Ok((Tensor::from_parts(vec![rois.len(), c, out_h, out_w], out), plans))
}

/// Batched RoIAlign: `feat` is N×C×h×w, the result R×C×out_h×out_w with one
/// item per roi. Each output bin averages `samples_per_bin²` bilinear samples
/// on a regular grid inside the bin.
pub fn roi_align_batched(
    tape: &mut Tape,
    feat: Var,
    rois: &[Roi],
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Var> {
    let (value, plans) = roi_forward(tape.value(feat), rois, out_h, out_w, samples_per_bin)?;
    Ok(tape.record(
        &[feat],
        value,
        RoiAlignFn {
            rois: rois.to_vec(),
            plans,
        },
    ))
}

/// RoIAlign of a single C×h×w plane stack; returns C×out_h×out_w.
pub fn roi_align(
    tape: &mut Tape,
    feat: Var,
    rect: Rect,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Var> {
    let shape = tape.shape(feat).to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "roi_align",
            msg: format!("expected C×h×w, got {shape:?}"),
        });
    }
    let batched = tape.reshape(feat, &[1, shape[0], shape[1], shape[2]])?;
    let out = roi_align_batched(tape, batched, &[Roi { batch: 0, rect }], out_h, out_w, samples_per_bin)?;
    tape.reshape(out, &[shape[0], out_h, out_w])
}

pub fn roi_align_values(
    feat: &Tensor,
    rect: Rect,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Tensor> {
    let shape = feat.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "roi_align",
            msg: format!("expected C×h×w, got {shape:?}"),
        });
    }
    let batched = feat.reshape(vec![1, shape[0], shape[1], shape[2]])?;
    let (out, _) = roi_forward(&batched, &[Roi { batch: 0, rect }], out_h, out_w, samples_per_bin)?;
    out.reshape(vec![shape[0], out_h, out_w])
}
