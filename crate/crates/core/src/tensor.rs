//! Dense rank-4 feature tensors in N x C x H x W layout, plus convolution geometry.

use crate::error::{Error, Result};

/// Dense rank-4 array of f32 in row-major N -> C -> H -> W order.
///
/// This is the universal data carrier: activations, images, and gradients all
/// use it. Data length is always `n * c * h * w` and every dimension is >= 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    /// Zero-filled tensor. Panics if any dimension is zero (programmer error).
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        assert!(
            n >= 1 && c >= 1 && h >= 1 && w >= 1,
            "tensor dims must be >= 1"
        );
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    /// Build from an existing flat buffer, validating the length.
    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "tensor dims must be >= 1, got {n}x{c}x{h}x{w}"
            )));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Dimension {
                axis: "data length",
                expected: n * c * h * w,
                got: data.len(),
            });
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// One image (all channels) of the batch as a contiguous slice.
    pub fn image(&self, n: usize) -> &[f32] {
        let stride = self.c * self.h * self.w;
        &self.data[n * stride..(n + 1) * stride]
    }

    /// Elementwise map into a fresh tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Concatenate along the channel axis. All other dims must agree.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        if a.n != b.n {
            return Err(Error::Dimension {
                axis: "batch",
                expected: a.n,
                got: b.n,
            });
        }
        if a.h != b.h || a.w != b.w {
            return Err(Error::Dimension {
                axis: "spatial",
                expected: a.h * a.w,
                got: b.h * b.w,
            });
        }
        let c_out = a.c + b.c;
        let mut out = Tensor4::zeros(a.n, c_out, a.h, a.w);
        let plane = a.h * a.w;
        for n in 0..a.n {
            let dst = &mut out.data[n * c_out * plane..(n + 1) * c_out * plane];
            dst[..a.c * plane].copy_from_slice(a.image(n));
            dst[a.c * plane..].copy_from_slice(b.image(n));
        }
        Ok(out)
    }

    /// Split along the channel axis at `c_split`.
    pub fn split_at_channel(&self, c_split: usize) -> Result<(Tensor4, Tensor4)> {
        if c_split == 0 || c_split >= self.c {
            return Err(Error::Dimension {
                axis: "channel split",
                expected: self.c,
                got: c_split,
            });
        }
        let plane = self.h * self.w;
        let mut first = Tensor4::zeros(self.n, c_split, self.h, self.w);
        let mut second = Tensor4::zeros(self.n, self.c - c_split, self.h, self.w);
        for n in 0..self.n {
            let src = self.image(n);
            first.data[n * c_split * plane..(n + 1) * c_split * plane]
                .copy_from_slice(&src[..c_split * plane]);
            second.data[n * (self.c - c_split) * plane..(n + 1) * (self.c - c_split) * plane]
                .copy_from_slice(&src[c_split * plane..]);
        }
        Ok((first, second))
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(
        kernel: usize,
        stride: usize,
        padding: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if kernel < 1 {
            return Err(Error::Geometry("kernel must be >= 1".into()));
        }
        if stride < 1 {
            return Err(Error::Geometry("stride must be >= 1".into()));
        }
        if in_channels < 1 || out_channels < 1 {
            return Err(Error::Geometry("channel counts must be >= 1".into()));
        }
        Ok(ConvGeometry {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        })
    }

    /// Output spatial dims: (h + 2p - k) / s + 1, which must divide exactly
    /// and be positive.
    pub fn output_hw(&self, h_in: usize, w_in: usize) -> Result<(usize, usize)> {
        let out = |dim: usize, axis: &'static str| -> Result<usize> {
            let padded = dim + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::Dimension {
                    axis,
                    expected: self.kernel,
                    got: padded,
                });
            }
            let span = padded - self.kernel;
            if span % self.stride != 0 {
                return Err(Error::Geometry(format!(
                    "{axis}: ({dim} + 2*{p} - {k}) not divisible by stride {s}",
                    p = self.padding,
                    k = self.kernel,
                    s = self.stride
                )));
            }
            Ok(span / self.stride + 1)
        };
        Ok((out(h_in, "height")?, out(w_in, "width")?))
    }

    /// Number of weights in a dense filter bank with this geometry.
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Number of weights when the convolution is split into `groups` groups.
    pub fn weight_len_grouped(&self, groups: usize) -> usize {
        self.out_channels * (self.in_channels / groups) * self.kernel * self.kernel
    }

    /// Check that channel counts are compatible with a group count.
    pub fn validate_groups(&self, groups: usize) -> Result<()> {
        if groups == 0 || self.in_channels % groups != 0 || self.out_channels % groups != 0 {
            return Err(Error::Geometry(format!(
                "groups {groups} must divide in_channels {} and out_channels {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        let err = Tensor4::from_vec(1, 2, 2, 2, vec![0.0; 7]).unwrap_err();
        match err {
            Error::Dimension { expected, got, .. } => {
                assert_eq!(expected, 8);
                assert_eq!(got, 7);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor4::from_vec(1, 2, 2, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 1), 3.0);
        assert_eq!(t.at(0, 1, 0, 0), 4.0);
        assert_eq!(t.at(0, 1, 1, 1), 7.0);
    }

    #[test]
    fn output_dims_require_exact_stride_fit() {
        let g = ConvGeometry::new(3, 2, 1, 1, 1).unwrap();
        // (32 + 2 - 3) = 31 is not divisible by 2.
        assert!(g.output_hw(32, 32).is_err());
        // (33 + 2 - 3) = 32 is.
        assert_eq!(g.output_hw(33, 33).unwrap(), (17, 17));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_an_error() {
        let g = ConvGeometry::new(5, 1, 0, 1, 1).unwrap();
        let err = g.output_hw(3, 3).unwrap_err();
        match err {
            Error::Dimension { axis, .. } => assert_eq!(axis, "height"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let a = Tensor4::from_vec(2, 1, 2, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        let b = Tensor4::from_vec(2, 2, 2, 2, (8..24).map(|v| v as f32).collect()).unwrap();
        let cat = Tensor4::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), (2, 3, 2, 2));
        let (a2, b2) = cat.split_at_channel(1).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
