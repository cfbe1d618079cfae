use crate::error::{Error, Result};
use crate::tensor::{Function, Tape, Tensor, Var};

use crate::tensor::gemm;

/// Value-level parameters of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// out_ch × in_ch × k × k
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// floor((in + 2·padding − k)/stride) + 1, or `None` when it would be < 1.
pub fn conv_output_extent(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || weight[2] != weight[3] {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("expected N×C×H×W input and O×C×k×k weight, got {input:?} and {weight:?}"),
            });
        }
        if input[1] != weight[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        if bias != [weight[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: weight.to_vec(),
                right: bias.to_vec(),
            });
        }
        let k = weight[2];
        let extent = |d: usize| {
            conv_output_extent(d, k, stride, padding).ok_or_else(|| Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {k} stride {stride} padding {padding} leaves no output for extent {d}"),
            })
        };
        Ok(ConvGeometry {
            in_ch: input[1],
            h: input[2],
            w: input[3],
            out_ch: weight[0],
            k,
            stride,
            padding,
            out_h: extent(input[2])?,
            out_w: extent(input[3])?,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one C×H×W image into (C·k·k) × (out_h·out_w).
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.padding as isize);
        let ncols = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates columns back into an image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.padding as isize);
        let ncols = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(geo: &ConvGeometry, n: usize, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    let in_len = geo.in_ch * geo.h * geo.w;
    let out_len = geo.out_ch * ncols;
    let mut out = vec![0.0; n * out_len];
    let mut cols = vec![0.0; rows * ncols];
    for b in 0..n {
        geo.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(geo.out_ch, rows, ncols, weight, (rows, 1), &cols, (ncols, 1), dst, 1.0);
    }
    out
}

struct Conv2dFn {
    geo: ConvGeometry,
}

impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let geo = &self.geo;
        let (x, w) = (inputs[0], inputs[1]);
        let n = x.shape()[0];
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());
        let in_len = geo.in_ch * geo.h * geo.w;
        let out_len = geo.out_ch * ncols;

        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0; geo.out_ch];
            for b in 0..n {
                let g = &grad.data()[b * out_len..(b + 1) * out_len];
                for (o, chunk) in g.chunks(ncols).enumerate() {
                    gb[o] += chunk.iter().sum::<f64>();
                }
            }
            Tensor::from_parts(vec![geo.out_ch], gb)
        });

        let mut cols = vec![0.0; rows * ncols];
        for b in 0..n {
            let g = &grad.data()[b * out_len..(b + 1) * out_len];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(&x.data()[b * in_len..(b + 1) * in_len], &mut cols);
                // gw += g (O×P) · colsᵀ (P×R)
                gemm(geo.out_ch, ncols, rows, g, (ncols, 1), &cols, (1, ncols), gw, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                // dcols = wᵀ (R×O) · g (O×P)
                gemm(rows, geo.out_ch, ncols, w.data(), (1, rows), g, (ncols, 1), &mut cols, 0.0);
                geo.col2im(&cols, &mut gx[b * in_len..(b + 1) * in_len]);
            }
        }

        vec![
            gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            gb,
        ]
    }
}

/// Cross-correlation with bias on an N×C×H×W input.
pub fn conv2d(tape: &mut Tape, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
    let geo = ConvGeometry::new(tape.shape(input), tape.shape(weight), tape.shape(bias), stride, padding)?;
    let n = tape.shape(input)[0];
    let out = conv_forward(&geo, n, tape.value(input).data(), tape.value(weight).data(), tape.value(bias).data());
    let value = Tensor::from_parts(vec![n, geo.out_ch, geo.out_h, geo.out_w], out);
    Ok(tape.record(&[input, weight, bias], value, Conv2dFn { geo }))
}

/// Convolution on plain values, no gradient recording.
pub fn conv2d_values(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let geo = ConvGeometry::new(
        input.shape(),
        params.weight.shape(),
        params.bias.shape(),
        params.stride,
        params.padding,
    )?;
    let n = input.shape()[0];
    let out = conv_forward(&geo, n, input.data(), params.weight.data(), params.bias.data());
    Ok(Tensor::from_parts(vec![n, geo.out_ch, geo.out_h, geo.out_w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive(input: &Tensor, p: &ConvParams) -> Tensor {
        let [n, c, h, w] = input.shape().try_into().unwrap();
        let [o, _, k, _] = p.weight.shape().try_into().unwrap();
        let oh = conv_output_extent(h, k, p.stride, p.padding).unwrap();
        let ow = conv_output_extent(w, k, p.stride, p.padding).unwrap();
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = p.bias.data()[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * p.stride + ki) as isize - p.padding as isize;
                                    let ix = (x * p.stride + kj) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * p.weight.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.5).collect()).unwrap()
    }

    #[test]
    fn one_by_one_identity() {
        let x = seq(&[1, 1, 3, 3], 0.1);
        let p = ConvParams {
            weight: Tensor::full(vec![1, 1, 1, 1], 1.0),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
            padding: 0,
        };
        assert_eq!(conv2d_values(&x, &p).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant() {
        let x = Tensor::full(vec![1, 1, 5, 5], 0.7);
        let p = ConvParams {
            weight: Tensor::full(vec![1, 1, 3, 3], 1.0),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
            padding: 0,
        };
        let y = conv2d_values(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        for v in y.data() {
            assert!((v - 9.0 * 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_with_stride_and_padding() {
        let x = seq(&[2, 3, 7, 6], 0.05);
        let p = ConvParams {
            weight: seq(&[4, 3, 3, 3], 0.03),
            bias: Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
            stride: 2,
            padding: 1,
        };
        let fast = conv2d_values(&x, &p).unwrap();
        let slow = naive(&x, &p);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let p = ConvParams {
            weight: Tensor::zeros(vec![1, 3, 3, 3]),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
            padding: 0,
        };
        assert!(matches!(conv2d_values(&x, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_output_extent(5, 3, 1, 0), Some(3));
        assert_eq!(conv_output_extent(2, 3, 1, 0), None);
    }
}
