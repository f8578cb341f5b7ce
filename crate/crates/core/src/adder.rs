//! Adder filters: sliding-window negative l1 distance between input patch and
//! weights, replacing multiply-accumulate with subtract-absolute-accumulate.
//! Used as the 1x1 point-wise layer of the ghost branch.

use crate::error::{Error, Result};
use crate::ops::im2col;
use crate::tensor::{ConvGeometry, Tensor4};

/// Dense weights for an adder convolution plus per-output-channel bias.
#[derive(Clone, Debug)]
pub struct AdderFilterBank {
    pub geometry: ConvGeometry,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl AdderFilterBank {
    pub fn new(geometry: ConvGeometry, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != geometry.weight_len() {
            return Err(Error::Dimension {
                axis: "adder weights",
                expected: geometry.weight_len(),
                got: weights.len(),
            });
        }
        if bias.len() != geometry.out_channels {
            return Err(Error::Dimension {
                axis: "bias",
                expected: geometry.out_channels,
                got: bias.len(),
            });
        }
        Ok(AdderFilterBank {
            geometry,
            weights,
            bias,
        })
    }
}

/// Sum of absolute differences over one patch, with the same four-accumulator
/// structure as [`crate::ops::dot`].
#[inline]
pub fn l1_distance(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for i in 0..chunks {
        let j = i * 4;
        s0 += (a[j] - b[j]).abs();
        s1 += (a[j + 1] - b[j + 1]).abs();
        s2 += (a[j + 2] - b[j + 2]).abs();
        s3 += (a[j + 3] - b[j + 3]).abs();
    }
    let mut tail = 0.0f32;
    for j in chunks * 4..n {
        tail += (a[j] - b[j]).abs();
    }
    (s0 + s1) + (s2 + s3) + tail
}

fn validate(input: &Tensor4, bank: &AdderFilterBank) -> Result<(usize, usize)> {
    if input.channels() != bank.geometry.in_channels {
        return Err(Error::Dimension {
            axis: "input channels",
            expected: bank.geometry.in_channels,
            got: input.channels(),
        });
    }
    bank.geometry.output_hw(input.height(), input.width())
}

/// Adder convolution: each output element is the negative l1 distance between
/// the (zero-padded) input patch and the filter, plus bias. Larger means more
/// similar, so outputs feed batch norm the same way convolutions do.
pub fn adder_conv2d(input: &Tensor4, bank: &AdderFilterBank) -> Result<Tensor4> {
    let (h_out, w_out) = validate(input, bank)?;
    let geom = &bank.geometry;
    let n = input.batch();
    let patch = geom.in_channels * geom.kernel * geom.kernel;
    let n_pos = h_out * w_out;
    let mut out = Tensor4::zeros(n, geom.out_channels, h_out, w_out);
    let mut col = vec![0.0f32; n_pos * patch];
    for ni in 0..n {
        im2col(input, ni, 0, geom.in_channels, geom, h_out, w_out, &mut col);
        for co in 0..geom.out_channels {
            let w_row = &bank.weights[co * patch..(co + 1) * patch];
            let b = bank.bias[co];
            let base = out.index(ni, co, 0, 0);
            let plane = &mut out.data_mut()[base..base + n_pos];
            for (pos, o) in plane.iter_mut().enumerate() {
                *o = b - l1_distance(&col[pos * patch..(pos + 1) * patch], w_row);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`adder_conv2d`].
///
/// Weight gradient is the true subgradient `sign(x - w)` (zero at the kink),
/// matching finite differences away from kinks. Input gradient is the
/// hard-tanh-clipped variant `clamp(w - x, -1, 1)`, which bounds gradient
/// magnitude during training and therefore does not match finite differences.
pub fn adder_conv2d_backward(
    input: &Tensor4,
    bank: &AdderFilterBank,
    upstream: &Tensor4,
) -> Result<(Tensor4, Vec<f32>, Vec<f32>)> {
    let (h_out, w_out) = validate(input, bank)?;
    let geom = &bank.geometry;
    if upstream.shape() != (input.batch(), geom.out_channels, h_out, w_out) {
        return Err(Error::Dimension {
            axis: "upstream",
            expected: input.batch() * geom.out_channels * h_out * w_out,
            got: upstream.len(),
        });
    }
    let n = input.batch();
    let patch = geom.in_channels * geom.kernel * geom.kernel;
    let n_pos = h_out * w_out;
    let mut dx = Tensor4::zeros(
        input.batch(),
        input.channels(),
        input.height(),
        input.width(),
    );
    let mut dw = vec![0.0f32; bank.weights.len()];
    let mut db = vec![0.0f32; geom.out_channels];
    let mut col = vec![0.0f32; n_pos * patch];
    let mut dcol = vec![0.0f32; n_pos * patch];

    let k = geom.kernel;
    let stride = geom.stride;
    let pad = geom.padding as isize;
    let (h_in, w_in) = (input.height() as isize, input.width() as isize);

    for ni in 0..n {
        im2col(input, ni, 0, geom.in_channels, geom, h_out, w_out, &mut col);
        dcol.iter_mut().for_each(|v| *v = 0.0);
        for co in 0..geom.out_channels {
            let w_row = &bank.weights[co * patch..(co + 1) * patch];
            let dw_row = &mut dw[co * patch..(co + 1) * patch];
            let up_base = upstream.index(ni, co, 0, 0);
            let up_plane = &upstream.data()[up_base..up_base + n_pos];
            for (pos, &g_up) in up_plane.iter().enumerate() {
                db[co] += g_up;
                let patch_vals = &col[pos * patch..(pos + 1) * patch];
                let dpatch = &mut dcol[pos * patch..(pos + 1) * patch];
                for j in 0..patch {
                    let d = patch_vals[j] - w_row[j];
                    // d/dw(-|x - w|) = sign(x - w), kink taken as 0
                    dw_row[j] += d.signum() * if d == 0.0 { 0.0 } else { 1.0 } * g_up;
                    dpatch[j] += (-d).clamp(-1.0, 1.0) * g_up;
                }
            }
        }
        // scatter dcol back onto the input (same layout as im2col)
        for oy in 0..h_out {
            for ox in 0..w_out {
                let pos = oy * w_out + ox;
                let src = &dcol[pos * patch..(pos + 1) * patch];
                let y0 = (oy * stride) as isize - pad;
                let x0 = (ox * stride) as isize - pad;
                let mut d = 0;
                for ci in 0..geom.in_channels {
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        for kx in 0..k {
                            let x = x0 + kx as isize;
                            if y >= 0 && x >= 0 && y < h_in && x < w_in {
                                let idx = dx.index(ni, ci, y as usize, x as usize);
                                dx.data_mut()[idx] += src[d];
                            }
                            d += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Per-layer normalized step for adder weights:
/// `eta * sqrt(count) / (||grad||_2 + 1e-8) * grad`.
///
/// Adder gradients carry much larger variance than convolution gradients;
/// normalizing the step per layer lets adder layers learn at a rate comparable
/// to the rest of the network.
pub fn adder_lr_scale(grad: &[f32], eta: f32) -> Vec<f32> {
    let norm = grad
        .iter()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt() as f32;
    let scale = eta * (grad.len() as f32).sqrt() / (norm + 1e-8);
    grad.iter().map(|&g| g * scale).collect()
}
