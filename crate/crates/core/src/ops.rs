//! Standard neural-network operations over [`Tensor4`]: dense convolution,
//! pooling, batch normalization, activations, the linear classifier head and
//! softmax cross-entropy. Backward passes are explicit per-op functions.
//!
//! Convolution uses im2col plus a row-times-patch product so inner loops stay
//! contiguous; the naive sliding-window form only appears in tests as the
//! oracle.

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor4};

/// Unrolled four-accumulator dot product.
///
/// The accumulation order of this function is a contract: the benchmark
/// harness ships kernels that must be bit-identical to the library path, and
/// they mirror exactly this structure.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0f32;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

/// Gather zero-padded patches of one image into `col`, laid out as
/// `[output position][channel-major patch]`. Patch element order is
/// channel, then kernel row, then kernel column.
pub fn im2col(
    input: &Tensor4,
    n: usize,
    c0: usize,
    c_count: usize,
    geom: &ConvGeometry,
    h_out: usize,
    w_out: usize,
    col: &mut [f32],
) {
    let k = geom.kernel;
    let stride = geom.stride;
    let pad = geom.padding as isize;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let patch = c_count * k * k;
    debug_assert_eq!(col.len(), h_out * w_out * patch);
    for oy in 0..h_out {
        for ox in 0..w_out {
            let pos = oy * w_out + ox;
            let dst = &mut col[pos * patch..(pos + 1) * patch];
            let y0 = (oy * stride) as isize - pad;
            let x0 = (ox * stride) as isize - pad;
            let mut d = 0;
            for ci in 0..c_count {
                for ky in 0..k {
                    let y = y0 + ky as isize;
                    for kx in 0..k {
                        let x = x0 + kx as isize;
                        dst[d] = if y < 0 || x < 0 || y >= h || x >= w {
                            0.0
                        } else {
                            input.at(n, c0 + ci, y as usize, x as usize)
                        };
                        d += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add the column buffer back onto the (zero-padded) input layout.
fn col2im_add(
    dcol: &[f32],
    dx: &mut Tensor4,
    n: usize,
    c0: usize,
    c_count: usize,
    geom: &ConvGeometry,
    h_out: usize,
    w_out: usize,
) {
    let k = geom.kernel;
    let stride = geom.stride;
    let pad = geom.padding as isize;
    let (h, w) = (dx.height() as isize, dx.width() as isize);
    let patch = c_count * k * k;
    for oy in 0..h_out {
        for ox in 0..w_out {
            let pos = oy * w_out + ox;
            let src = &dcol[pos * patch..(pos + 1) * patch];
            let y0 = (oy * stride) as isize - pad;
            let x0 = (ox * stride) as isize - pad;
            let mut d = 0;
            for ci in 0..c_count {
                for ky in 0..k {
                    let y = y0 + ky as isize;
                    for kx in 0..k {
                        let x = x0 + kx as isize;
                        if y >= 0 && x >= 0 && y < h && x < w {
                            let idx = dx.index(n, c0 + ci, y as usize, x as usize);
                            dx.data_mut()[idx] += src[d];
                        }
                        d += 1;
                    }
                }
            }
        }
    }
}

fn validate_conv_args(
    input: &Tensor4,
    weights: &[f32],
    bias: &[f32],
    geom: &ConvGeometry,
    groups: usize,
) -> Result<()> {
    geom.validate_groups(groups)?;
    if input.channels() != geom.in_channels {
        return Err(Error::Dimension {
            axis: "input channels",
            expected: geom.in_channels,
            got: input.channels(),
        });
    }
    if weights.len() != geom.weight_len_grouped(groups) {
        return Err(Error::Dimension {
            axis: "weights",
            expected: geom.weight_len_grouped(groups),
            got: weights.len(),
        });
    }
    if bias.len() != geom.out_channels {
        return Err(Error::Dimension {
            axis: "bias",
            expected: geom.out_channels,
            got: bias.len(),
        });
    }
    Ok(())
}

/// Dense 2-D cross-correlation with per-channel bias.
pub fn conv2d(
    input: &Tensor4,
    weights: &[f32],
    bias: &[f32],
    geom: &ConvGeometry,
) -> Result<Tensor4> {
    conv2d_grouped(input, weights, bias, geom, 1)
}

/// Grouped variant: channels are split into `groups` independent convolutions.
/// `groups == in_channels` with a channel multiplier gives depthwise convolution.
/// Weights are laid out `[out_channel][in_channel_within_group][ky][kx]`.
pub fn conv2d_grouped(
    input: &Tensor4,
    weights: &[f32],
    bias: &[f32],
    geom: &ConvGeometry,
    groups: usize,
) -> Result<Tensor4> {
    validate_conv_args(input, weights, bias, geom, groups)?;
    let (h_out, w_out) = geom.output_hw(input.height(), input.width())?;
    let n = input.batch();
    let cig = geom.in_channels / groups;
    let cog = geom.out_channels / groups;
    let patch = cig * geom.kernel * geom.kernel;
    let n_pos = h_out * w_out;

    let mut out = Tensor4::zeros(n, geom.out_channels, h_out, w_out);
    let mut col = vec![0.0f32; n_pos * patch];
    for ni in 0..n {
        for g in 0..groups {
            im2col(input, ni, g * cig, cig, geom, h_out, w_out, &mut col);
            for m in 0..cog {
                let co = g * cog + m;
                let w_row = &weights[co * patch..(co + 1) * patch];
                let b = bias[co];
                let base = out.index(ni, co, 0, 0);
                let plane = &mut out.data_mut()[base..base + n_pos];
                for (pos, o) in plane.iter_mut().enumerate() {
                    *o = dot(&col[pos * patch..(pos + 1) * patch], w_row) + b;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_grouped`] w.r.t. input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor4,
    weights: &[f32],
    geom: &ConvGeometry,
    groups: usize,
    upstream: &Tensor4,
) -> Result<(Tensor4, Vec<f32>, Vec<f32>)> {
    geom.validate_groups(groups)?;
    if input.channels() != geom.in_channels {
        return Err(Error::Dimension {
            axis: "input channels",
            expected: geom.in_channels,
            got: input.channels(),
        });
    }
    if weights.len() != geom.weight_len_grouped(groups) {
        return Err(Error::Dimension {
            axis: "weights",
            expected: geom.weight_len_grouped(groups),
            got: weights.len(),
        });
    }
    let (h_out, w_out) = geom.output_hw(input.height(), input.width())?;
    if upstream.shape() != (input.batch(), geom.out_channels, h_out, w_out) {
        return Err(Error::Dimension {
            axis: "upstream",
            expected: input.batch() * geom.out_channels * h_out * w_out,
            got: upstream.len(),
        });
    }

    let n = input.batch();
    let cig = geom.in_channels / groups;
    let cog = geom.out_channels / groups;
    let patch = cig * geom.kernel * geom.kernel;
    let n_pos = h_out * w_out;

    let mut dx = Tensor4::zeros(
        input.batch(),
        input.channels(),
        input.height(),
        input.width(),
    );
    let mut dw = vec![0.0f32; weights.len()];
    let mut db = vec![0.0f32; geom.out_channels];
    let mut col = vec![0.0f32; n_pos * patch];
    let mut dcol = vec![0.0f32; n_pos * patch];

    for ni in 0..n {
        for g in 0..groups {
            im2col(input, ni, g * cig, cig, geom, h_out, w_out, &mut col);
            dcol.iter_mut().for_each(|v| *v = 0.0);
            for m in 0..cog {
                let co = g * cog + m;
                let w_row = &weights[co * patch..(co + 1) * patch];
                let dw_row = &mut dw[co * patch..(co + 1) * patch];
                let up_base = upstream.index(ni, co, 0, 0);
                let up_plane = &upstream.data()[up_base..up_base + n_pos];
                for (pos, &g_up) in up_plane.iter().enumerate() {
                    db[co] += g_up;
                    axpy(g_up, &col[pos * patch..(pos + 1) * patch], dw_row);
                    axpy(g_up, w_row, &mut dcol[pos * patch..(pos + 1) * patch]);
                }
            }
            col2im_add(&dcol, &mut dx, ni, g * cig, cig, geom, h_out, w_out);
        }
    }
    Ok((dx, dw, db))
}

/// Max pooling. Output dims follow `(dim - window) / stride + 1` with floor
/// semantics; the window must fit inside the input.
pub fn maxpool2d(input: &Tensor4, window: usize, stride: usize) -> Result<Tensor4> {
    maxpool2d_with_indices(input, window, stride).map(|(t, _)| t)
}

/// Max pooling that also returns, per output element, the flat index of the
/// winning input element (first maximum wins ties). Needed for the backward pass.
pub fn maxpool2d_with_indices(
    input: &Tensor4,
    window: usize,
    stride: usize,
) -> Result<(Tensor4, Vec<usize>)> {
    if window < 1 || stride < 1 {
        return Err(Error::Geometry(
            "pool window and stride must be >= 1".into(),
        ));
    }
    let (n, c, h, w) = input.shape();
    if h < window {
        return Err(Error::Dimension {
            axis: "height",
            expected: window,
            got: h,
        });
    }
    if w < window {
        return Err(Error::Dimension {
            axis: "width",
            expected: window,
            got: w,
        });
    }
    let h_out = (h - window) / stride + 1;
    let w_out = (w - window) / stride + 1;
    let mut out = Tensor4::zeros(n, c, h_out, w_out);
    let mut indices = vec![0usize; n * c * h_out * w_out];
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = input.index(ni, ci, oy * stride + ky, ox * stride + kx);
                            let v = input.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    indices[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, indices))
}

/// Route upstream gradients back to the argmax positions.
pub fn maxpool2d_backward(
    input_shape: (usize, usize, usize, usize),
    indices: &[usize],
    upstream: &Tensor4,
) -> Tensor4 {
    let mut dx = Tensor4::zeros(input_shape.0, input_shape.1, input_shape.2, input_shape.3);
    for (i, &src) in indices.iter().enumerate() {
        dx.data_mut()[src] += upstream.data()[i];
    }
    dx
}

/// Train vs. eval behaviour for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State saved by a training-mode batch-norm forward pass.
pub struct BnCache {
    pub x_hat: Tensor4,
    pub inv_std: Vec<f32>,
}

/// Batch normalization over the channel axis.
///
/// Train mode normalizes with biased batch statistics and folds them into the
/// running estimates as `running = momentum * running + (1 - momentum) * batch`.
/// Eval mode normalizes with the running estimates and returns no cache.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward(
    input: &Tensor4,
    scale: &[f32],
    shift: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
    mode: Mode,
    epsilon: f32,
    momentum: f32,
) -> Result<(Tensor4, Option<BnCache>)> {
    let (n, c, h, w) = input.shape();
    for (len, axis) in [
        (scale.len(), "scale"),
        (shift.len(), "shift"),
        (running_mean.len(), "running mean"),
        (running_var.len(), "running var"),
    ] {
        if len != c {
            return Err(Error::Dimension {
                axis,
                expected: c,
                got: len,
            });
        }
    }
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut out = Tensor4::zeros(n, c, h, w);
    match mode {
        Mode::Train => {
            let mut x_hat = Tensor4::zeros(n, c, h, w);
            let mut inv_std = vec![0.0f32; c];
            for ci in 0..c {
                let mut sum = 0.0f64;
                for ni in 0..n {
                    let base = input.index(ni, ci, 0, 0);
                    for v in &input.data()[base..base + plane] {
                        sum += *v as f64;
                    }
                }
                let mean = (sum / m as f64) as f32;
                let mut var_sum = 0.0f64;
                for ni in 0..n {
                    let base = input.index(ni, ci, 0, 0);
                    for v in &input.data()[base..base + plane] {
                        let d = (*v - mean) as f64;
                        var_sum += d * d;
                    }
                }
                let var = (var_sum / m as f64) as f32;
                let istd = 1.0 / (var + epsilon).sqrt();
                inv_std[ci] = istd;
                running_mean[ci] = momentum * running_mean[ci] + (1.0 - momentum) * mean;
                running_var[ci] = momentum * running_var[ci] + (1.0 - momentum) * var;
                for ni in 0..n {
                    let base = input.index(ni, ci, 0, 0);
                    for j in 0..plane {
                        let xh = (input.data()[base + j] - mean) * istd;
                        x_hat.data_mut()[base + j] = xh;
                        out.data_mut()[base + j] = scale[ci] * xh + shift[ci];
                    }
                }
            }
            Ok((out, Some(BnCache { x_hat, inv_std })))
        }
        Mode::Eval => {
            for ci in 0..c {
                let istd = 1.0 / (running_var[ci] + epsilon).sqrt();
                let mean = running_mean[ci];
                for ni in 0..n {
                    let base = input.index(ni, ci, 0, 0);
                    for j in 0..plane {
                        out.data_mut()[base + j] =
                            scale[ci] * (input.data()[base + j] - mean) * istd + shift[ci];
                    }
                }
            }
            Ok((out, None))
        }
    }
}

/// Gradients of a training-mode batch-norm forward.
pub fn batch_norm_backward(
    cache: &BnCache,
    scale: &[f32],
    upstream: &Tensor4,
) -> (Tensor4, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = cache.x_hat.shape();
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut dscale = vec![0.0f32; c];
    let mut dshift = vec![0.0f32; c];
    for ci in 0..c {
        let mut ds = 0.0f64;
        let mut db = 0.0f64;
        for ni in 0..n {
            let base = cache.x_hat.index(ni, ci, 0, 0);
            for j in 0..plane {
                let dy = upstream.data()[base + j] as f64;
                db += dy;
                ds += dy * cache.x_hat.data()[base + j] as f64;
            }
        }
        dscale[ci] = ds as f32;
        dshift[ci] = db as f32;
    }
    let mut dx = Tensor4::zeros(n, c, h, w);
    for ci in 0..c {
        let k = scale[ci] * cache.inv_std[ci] / m;
        for ni in 0..n {
            let base = cache.x_hat.index(ni, ci, 0, 0);
            for j in 0..plane {
                let dy = upstream.data()[base + j];
                let xh = cache.x_hat.data()[base + j];
                dx.data_mut()[base + j] = k * (m * dy - dshift[ci] - xh * dscale[ci]);
            }
        }
    }
    (dx, dscale, dshift)
}

pub fn relu(input: &Tensor4) -> Tensor4 {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor4, upstream: &Tensor4) -> Tensor4 {
    let mut dx = upstream.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// x * clamp(x + 3, 0, 6) / 6.
pub fn hard_swish(input: &Tensor4) -> Tensor4 {
    input.map(|v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0)
}

pub fn hard_swish_backward(input: &Tensor4, upstream: &Tensor4) -> Tensor4 {
    let mut dx = upstream.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        let g = if x <= -3.0 {
            0.0
        } else if x >= 3.0 {
            1.0
        } else {
            (2.0 * x + 3.0) / 6.0
        };
        *d *= g;
    }
    dx
}

/// Spatial mean per channel, shape (n, c, 1, 1).
pub fn global_avg_pool(input: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = input.shape();
    let plane = (h * w) as f32;
    let mut out = Tensor4::zeros(n, c, 1, 1);
    for ni in 0..n {
        for ci in 0..c {
            let base = input.index(ni, ci, 0, 0);
            let sum: f32 = input.data()[base..base + h * w].iter().sum();
            out.set(ni, ci, 0, 0, sum / plane);
        }
    }
    out
}

pub fn global_avg_pool_backward(
    input_shape: (usize, usize, usize, usize),
    upstream: &Tensor4,
) -> Tensor4 {
    let (n, c, h, w) = input_shape;
    let inv = 1.0 / (h * w) as f32;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let g = upstream.at(ni, ci, 0, 0) * inv;
            let base = dx.index(ni, ci, 0, 0);
            for v in &mut dx.data_mut()[base..base + h * w] {
                *v = g;
            }
        }
    }
    dx
}

/// Fully connected layer: `logits[n][o] = sum_i x[n][i] * w[o][i] + b[o]`.
pub fn linear(
    input: &[f32],
    batch: usize,
    in_features: usize,
    weights: &[f32],
    bias: &[f32],
) -> Result<Vec<f32>> {
    if input.len() != batch * in_features {
        return Err(Error::Dimension {
            axis: "linear input",
            expected: batch * in_features,
            got: input.len(),
        });
    }
    let out_features = bias.len();
    if weights.len() != out_features * in_features {
        return Err(Error::Dimension {
            axis: "linear weights",
            expected: out_features * in_features,
            got: weights.len(),
        });
    }
    let mut out = vec![0.0f32; batch * out_features];
    for n in 0..batch {
        let x = &input[n * in_features..(n + 1) * in_features];
        for o in 0..out_features {
            out[n * out_features + o] =
                dot(x, &weights[o * in_features..(o + 1) * in_features]) + bias[o];
        }
    }
    Ok(out)
}

pub fn linear_backward(
    input: &[f32],
    batch: usize,
    in_features: usize,
    weights: &[f32],
    out_features: usize,
    upstream: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; batch * in_features];
    let mut dw = vec![0.0f32; out_features * in_features];
    let mut db = vec![0.0f32; out_features];
    for n in 0..batch {
        let x = &input[n * in_features..(n + 1) * in_features];
        let dxn = &mut dx[n * in_features..(n + 1) * in_features];
        for o in 0..out_features {
            let g = upstream[n * out_features + o];
            db[o] += g;
            axpy(g, x, &mut dw[o * in_features..(o + 1) * in_features]);
            axpy(g, &weights[o * in_features..(o + 1) * in_features], dxn);
        }
    }
    (dx, dw, db)
}

/// Mean negative log-softmax of the true class, plus its gradient
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(
    logits: &[f32],
    batch: usize,
    classes: usize,
    labels: &[u32],
) -> Result<(f32, Vec<f32>)> {
    if logits.len() != batch * classes {
        return Err(Error::Dimension {
            axis: "logits",
            expected: batch * classes,
            got: logits.len(),
        });
    }
    if labels.len() != batch {
        return Err(Error::Dimension {
            axis: "labels",
            expected: batch,
            got: labels.len(),
        });
    }
    let mut grad = vec![0.0f32; batch * classes];
    let mut loss = 0.0f64;
    let inv_n = 1.0 / batch as f32;
    for n in 0..batch {
        let label = labels[n] as usize;
        if label >= classes {
            return Err(Error::Validation(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum_exp = 0.0f32;
        for &z in row {
            sum_exp += (z - max).exp();
        }
        let lse = max + sum_exp.ln();
        loss += (lse - row[label]) as f64;
        let g = &mut grad[n * classes..(n + 1) * classes];
        for (j, &z) in row.iter().enumerate() {
            g[j] = (z - max).exp() / sum_exp * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok(((loss / batch as f64) as f32, grad))
}
