//! Neural building blocks on top of the tape: convolution, pooling, linear
//! maps, log-softmax, and the bilinear samplers.

mod conv;
mod sample;

pub use conv::{conv2d, conv2d_values, conv_output_extent, ConvParams};
pub use sample::{
    bilinear_resize, bilinear_resize_values, roi_align, roi_align_batched, roi_align_values, Rect, Roi,
};

use crate::error::{Error, Result};
use crate::tensor::{Function, Tape, Tensor, Var};

/// Mask R-CNN default.
pub const DEFAULT_SAMPLES_PER_BIN: usize = 2;

struct GlobalAvgPoolFn;

impl Function for GlobalAvgPoolFn {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let hw = x.shape()[2] * x.shape()[3];
        let inv = 1.0 / hw as f64;
        let mut gx = Vec::with_capacity(x.len());
        for &g in grad.data() {
            gx.extend(std::iter::repeat(g * inv).take(hw));
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
    }
}

/// Per-channel spatial mean: N×C×H×W → N×C.
pub fn global_avg_pool(tape: &mut Tape, input: Var) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::InvalidShape {
            op: "global_avg_pool",
            msg: format!("expected N×C×H×W with H, W ≥ 1, got {shape:?}"),
        });
    }
    let hw = shape[2] * shape[3];
    let data = tape
        .value(input)
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    let value = Tensor::from_parts(vec![shape[0], shape[1]], data);
    Ok(tape.record(&[input], value, GlobalAvgPoolFn))
}

struct LogSoftmaxFn;

impl Function for LogSoftmaxFn {
    fn name(&self) -> &'static str {
        "log_softmax"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let k = output.shape()[1];
        let mut gx = Vec::with_capacity(output.len());
        for (y, g) in output.data().chunks(k).zip(grad.data().chunks(k)) {
            let total: f64 = g.iter().sum();
            gx.extend(y.iter().zip(g).map(|(y, g)| g - y.exp() * total));
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx))]
    }
}

/// Row-wise log-softmax of N×K logits, stabilised by max subtraction.
pub fn log_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let value = log_softmax_values(tape.value(logits))?;
    Ok(tape.record(&[logits], value, LogSoftmaxFn))
}

pub fn log_softmax_values(logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::InvalidShape {
            op: "log_softmax",
            msg: format!("expected N×K logits, got {shape:?}"),
        });
    }
    if !logits.all_finite() {
        return Err(Error::Domain {
            op: "log_softmax",
            msg: "non-finite logit".into(),
        });
    }
    let k = shape[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// `x·W + b` with `x` N×D, `W` D×K and `b` K.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add(y, bias)
}

struct RowNormFn;

impl Function for RowNormFn {
    fn name(&self) -> &'static str {
        "row_l2_norm"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let d = x.shape()[1];
        let mut gx = Vec::with_capacity(x.len());
        for ((row, &norm), &g) in x.data().chunks(d).zip(output.data()).zip(grad.data()) {
            // Subgradient 0 at the origin.
            let scale = if norm > 0.0 { g / norm } else { 0.0 };
            gx.extend(row.iter().map(|v| v * scale));
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
    }
}

/// Euclidean norm of each row of an R×D matrix.
pub fn row_l2_norm(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::InvalidShape {
            op: "row_l2_norm",
            msg: format!("expected R×D, got {shape:?}"),
        });
    }
    let data: Vec<f64> = tape
        .value(x)
        .data()
        .chunks(shape[1])
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if tape.requires_grad(x) {
        let nonzero: Vec<bool> = data.iter().map(|&n| n > 0.0).collect();
        tape.note_branches(nonzero.into_iter());
    }
    let value = Tensor::from_parts(vec![shape[0]], data);
    Ok(tape.record(&[x], value, RowNormFn))
}
