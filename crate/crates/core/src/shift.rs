//! Bit-wise shift weights `s * 2^p` with sign `s` in {-1, 0, +1} and integer
//! exponent `p`, quantization from continuous proxy weights, and the shift
//! convolution forward/backward pair.
//!
//! Multiplying a normal f32 by an exact power of two only rewrites the
//! exponent field, so a shift layer can be realized either as a float multiply
//! by the densified `s * 2^p` value or as integer arithmetic on the exponent
//! bits; both must agree bit-for-bit. [`shift_mul`] is the exponent-field
//! realization and falls back to the multiply whenever the result would leave
//! the normal range.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{ConvGeometry, Tensor4};

/// Default exponent range. Five bits are already enough to store the weights
/// of trained shift networks; [-8, 8] is generous and exactly representable.
pub const DEFAULT_P_MIN: i8 = -8;
pub const DEFAULT_P_MAX: i8 = 8;

/// One shift weight: sign, exponent, and the continuous training-time proxy
/// it was quantized from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftWeight {
    pub s: i8,
    pub p: i8,
    pub proxy: f32,
}

impl ShiftWeight {
    /// The dense value `s * 2^p` (exact in f32 for the default range).
    #[inline]
    pub fn effective(&self) -> f32 {
        self.s as f32 * exp2_i32(self.p as i32)
    }
}

#[inline]
fn exp2_i32(p: i32) -> f32 {
    f32::from_bits(((127 + p) as u32) << 23)
}

/// Threshold below which a proxy quantizes to s = 0: half of the smallest
/// representable magnitude, i.e. nearest-value rounding toward zero.
#[inline]
pub fn zero_threshold(p_min: i8) -> f32 {
    exp2_i32(p_min as i32 - 1)
}

/// Round a continuous proxy to the nearest power of two in log space.
///
/// The sign becomes `s`; the exponent is `round(log2 |proxy|)` clamped to
/// `[p_min, p_max]`. Magnitudes below [`zero_threshold`] collapse to s = 0.
pub fn quantize_shift(proxy: f32, p_min: i8, p_max: i8) -> Result<ShiftWeight> {
    if !proxy.is_finite() {
        return Err(Error::Validation(format!(
            "shift proxy must be finite, got {proxy}"
        )));
    }
    debug_assert!(p_min <= p_max);
    let mag = proxy.abs();
    if mag < zero_threshold(p_min) {
        return Ok(ShiftWeight { s: 0, p: 0, proxy });
    }
    let s = if proxy > 0.0 { 1i8 } else { -1i8 };
    let p = (mag.log2().round() as i32).clamp(p_min as i32, p_max as i32) as i8;
    Ok(ShiftWeight { s, p, proxy })
}

/// `x * s * 2^p` computed by adding `p` to the exponent field of `x`.
///
/// Bit-identical to the float multiply for every input; the multiply fallback
/// covers zeros, subnormals, infinities and results outside the normal range.
#[inline]
pub fn shift_mul(x: f32, s: i8, p: i8) -> f32 {
    let w = s as f32 * exp2_i32(p as i32);
    let bits = x.to_bits();
    let exp = (bits >> 23) & 0xff;
    if s == 0 || exp == 0 || exp == 0xff {
        return x * w;
    }
    let new_exp = exp as i32 + p as i32;
    if new_exp <= 0 || new_exp >= 0xff {
        return x * w;
    }
    let shifted = f32::from_bits((bits & !(0xff << 23)) | ((new_exp as u32) << 23));
    if s < 0 {
        -shifted
    } else {
        shifted
    }
}

/// A bank of shift filters plus per-output-channel bias.
///
/// `groups` partitions channels exactly as in [`ops::conv2d_grouped`]; the
/// depthwise layer of a ghost branch is a shift bank with `groups` equal to
/// its input channel count.
#[derive(Clone, Debug)]
pub struct ShiftFilterBank {
    pub geometry: ConvGeometry,
    pub groups: usize,
    pub weights: Vec<ShiftWeight>,
    pub bias: Vec<f32>,
}

impl ShiftFilterBank {
    pub fn new(
        geometry: ConvGeometry,
        groups: usize,
        weights: Vec<ShiftWeight>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        geometry.validate_groups(groups)?;
        if weights.len() != geometry.weight_len_grouped(groups) {
            return Err(Error::Dimension {
                axis: "shift weights",
                expected: geometry.weight_len_grouped(groups),
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
        Ok(ShiftFilterBank {
            geometry,
            groups,
            weights,
            bias,
        })
    }

    /// Quantize a proxy array into a bank.
    pub fn from_proxies(
        geometry: ConvGeometry,
        groups: usize,
        proxies: &[f32],
        bias: Vec<f32>,
        p_min: i8,
        p_max: i8,
    ) -> Result<Self> {
        let weights = proxies
            .iter()
            .map(|&w| quantize_shift(w, p_min, p_max))
            .collect::<Result<Vec<_>>>()?;
        ShiftFilterBank::new(geometry, groups, weights, bias)
    }

    /// Dense `s * 2^p` values, ready for the ordinary convolution path.
    pub fn densify(&self) -> Vec<f32> {
        self.weights.iter().map(|w| w.effective()).collect()
    }
}

/// Shift convolution: numerically identical to dense convolution with the
/// densified `s * 2^p` weights, bias included.
pub fn shift_conv2d(input: &Tensor4, bank: &ShiftFilterBank) -> Result<Tensor4> {
    let dense = bank.densify();
    ops::conv2d_grouped(input, &dense, &bank.bias, &bank.geometry, bank.groups)
}

/// Backward pass for a shift layer under the straight-through convention.
///
/// The input gradient is taken against the quantized effective weights; the
/// proxy gradient is the dense-convolution weight gradient passed through the
/// quantizer as if it were the identity.
pub fn shift_conv2d_backward(
    input: &Tensor4,
    bank: &ShiftFilterBank,
    upstream: &Tensor4,
) -> Result<(Tensor4, Vec<f32>, Vec<f32>)> {
    let dense = bank.densify();
    ops::conv2d_backward(input, &dense, &bank.geometry, bank.groups, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_zero_and_exact_powers() {
        let w = quantize_shift(0.0, DEFAULT_P_MIN, DEFAULT_P_MAX).unwrap();
        assert_eq!(w.s, 0);
        assert_eq!(w.effective(), 0.0);

        let w = quantize_shift(-0.25, DEFAULT_P_MIN, DEFAULT_P_MAX).unwrap();
        assert_eq!((w.s, w.p), (-1, -2));
        assert_eq!(w.effective(), -0.25);
    }

    #[test]
    fn quantize_rounds_in_log_space() {
        // log2 0.75 = -0.415, rounds to 0 -> effective 1.0
        let w = quantize_shift(0.75, DEFAULT_P_MIN, DEFAULT_P_MAX).unwrap();
        assert_eq!((w.s, w.p), (1, 0));
        assert_eq!(w.effective(), 1.0);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(quantize_shift(f32::NAN, -8, 8).is_err());
        assert!(quantize_shift(f32::INFINITY, -8, 8).is_err());
    }

    #[test]
    fn quantize_idempotent_on_powers_of_two() {
        for p in DEFAULT_P_MIN..=DEFAULT_P_MAX {
            for s in [-1i8, 1] {
                let v = s as f32 * 2f32.powi(p as i32);
                let w = quantize_shift(v, DEFAULT_P_MIN, DEFAULT_P_MAX).unwrap();
                assert_eq!((w.s, w.p), (s, p), "value {v}");
                assert_eq!(w.effective(), v);
            }
        }
    }

    proptest! {
        #[test]
        fn quantize_error_bound_within_range(mag in 2f64.powi(-8)* (2f64).sqrt().recip() .. 2f64.powi(8) * (2f64).sqrt(), neg in proptest::bool::ANY) {
            // magnitudes whose rounded exponent lands inside [-8, 8] unclamped
            let proxy = if neg { -(mag as f32) } else { mag as f32 };
            let w = quantize_shift(proxy, DEFAULT_P_MIN, DEFAULT_P_MAX).unwrap();
            prop_assert!(w.s != 0);
            let ratio = (w.effective() / proxy) as f64;
            prop_assert!(ratio >= 2f64.powf(-0.5) - 1e-9 && ratio <= 2f64.powf(0.5) + 1e-9,
                "proxy {proxy} effective {} ratio {ratio}", w.effective());
        }

        #[test]
        fn quantize_sign_symmetric(proxy in -300.0f32..300.0) {
            let a = quantize_shift(proxy, DEFAULT_P_MIN, DEFAULT_P_MAX).unwrap();
            let b = quantize_shift(-proxy, DEFAULT_P_MIN, DEFAULT_P_MAX).unwrap();
            prop_assert_eq!(a.s, -b.s);
            prop_assert_eq!(a.effective(), -b.effective());
        }

        #[test]
        fn shift_mul_is_bit_identical_to_multiply(
            x in -1000.0f32..1000.0,
            s in -1i8..=1,
            p in -8i8..=8,
        ) {
            let w = s as f32 * 2f32.powi(p as i32);
            prop_assert_eq!(shift_mul(x, s, p).to_bits(), (x * w).to_bits());
        }
    }

    #[test]
    fn shift_mul_edge_cases() {
        // subnormal, zero, infinity all take the fallback and stay exact
        for x in [0.0f32, -0.0, f32::MIN_POSITIVE / 4.0, f32::INFINITY, 1e-38] {
            for p in [-8i8, 0, 8] {
                for s in [-1i8, 0, 1] {
                    let w = s as f32 * 2f32.powi(p as i32);
                    assert_eq!(shift_mul(x, s, p).to_bits(), (x * w).to_bits());
                }
            }
        }
    }

    #[test]
    fn shift_conv_scalar_left_shift_doubles() {
        // weight s=1, p=1 doubles the input
        let input = Tensor4::from_vec(1, 1, 1, 1, vec![3.0]).unwrap();
        let geom = ConvGeometry::new(1, 1, 0, 1, 1).unwrap();
        let bank = ShiftFilterBank::new(
            geom,
            1,
            vec![ShiftWeight {
                s: 1,
                p: 1,
                proxy: 2.0,
            }],
            vec![0.0],
        )
        .unwrap();
        let out = shift_conv2d(&input, &bank).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn shift_conv_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let input = Tensor4::from_vec(1, 1, 4, 4, data.clone()).unwrap();
        let geom = ConvGeometry::new(1, 1, 0, 1, 1).unwrap();
        let bank = ShiftFilterBank::new(
            geom,
            1,
            vec![ShiftWeight {
                s: 1,
                p: 0,
                proxy: 1.0,
            }],
            vec![0.0],
        )
        .unwrap();
        let out = shift_conv2d(&input, &bank).unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    fn random_bank(rng: &mut ChaCha8Rng, geom: ConvGeometry, groups: usize) -> ShiftFilterBank {
        let weights = (0..geom.weight_len_grouped(groups))
            .map(|_| {
                let s = *[-1i8, 0, 1].get(rng.random_range(0..3)).unwrap();
                let p = rng.random_range(-8i8..=8);
                ShiftWeight {
                    s,
                    p,
                    proxy: s as f32 * 2f32.powi(p as i32),
                }
            })
            .collect();
        let bias = (0..geom.out_channels)
            .map(|_| rng.random_range(-0.5f32..0.5))
            .collect();
        ShiftFilterBank::new(geom, groups, weights, bias).unwrap()
    }

    #[test]
    fn shift_conv_equals_densified_conv_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let k = if rng.random_range(0..2) == 0 { 1 } else { 3 };
            let c_in = rng.random_range(1..=4usize);
            let c_out = rng.random_range(1..=4usize);
            let h = rng.random_range(k..=8);
            let w = rng.random_range(k..=8);
            let geom = ConvGeometry::new(k, 1, k / 2, c_in, c_out).unwrap();
            let bank = random_bank(&mut rng, geom, 1);
            let data: Vec<f32> = (0..2 * c_in * h * w)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            let input = Tensor4::from_vec(2, c_in, h, w, data).unwrap();
            let shifted = shift_conv2d(&input, &bank).unwrap();
            let dense = ops::conv2d_grouped(&input, &bank.densify(), &bank.bias, &geom, 1).unwrap();
            for (a, b) in shifted.data().iter().zip(dense.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn shift_backward_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geom = ConvGeometry::new(3, 1, 1, 2, 2).unwrap();
        let bank = random_bank(&mut rng, geom, 1);
        let input = Tensor4::from_vec(
            1,
            2,
            4,
            4,
            (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let upstream = Tensor4::zeros(1, 2, 4, 4);
        let (dx, dproxy, db) = shift_conv2d_backward(&input, &bank, &upstream).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dproxy.iter().all(|&v| v == 0.0));
        assert!(db.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_backward_proxy_grad_is_dense_weight_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let geom = ConvGeometry::new(3, 1, 1, 2, 3).unwrap();
        let bank = random_bank(&mut rng, geom, 1);
        let input = Tensor4::from_vec(
            1,
            2,
            5,
            5,
            (0..50).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let upstream = Tensor4::from_vec(
            1,
            3,
            5,
            5,
            (0..75).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let (_, dproxy, _) = shift_conv2d_backward(&input, &bank, &upstream).unwrap();
        let (_, dw_dense, _) =
            ops::conv2d_backward(&input, &bank.densify(), &geom, 1, &upstream).unwrap();
        assert_eq!(dproxy, dw_dense);
    }

    #[test]
    fn shift_backward_input_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let geom = ConvGeometry::new(3, 1, 1, 1, 2).unwrap();
        let bank = random_bank(&mut rng, geom, 1);
        let input = Tensor4::from_vec(
            1,
            1,
            4,
            4,
            (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let probe: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let upstream = Tensor4::from_vec(1, 2, 4, 4, probe.clone()).unwrap();
        let (dx, _, _) = shift_conv2d_backward(&input, &bank, &upstream).unwrap();

        // f64 oracle: dense conv with densified weights
        let dense: Vec<f64> = bank.densify().iter().map(|&v| v as f64).collect();
        let objective = |x: &Tensor4| -> f64 {
            let mut total = 0.0;
            let mut oi = 0;
            for co in 0..2 {
                for oy in 0..4i64 {
                    for ox in 0..4i64 {
                        let mut acc = bank.bias[co] as f64;
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let y = oy + ky - 1;
                                let xx = ox + kx - 1;
                                if y < 0 || xx < 0 || y >= 4 || xx >= 4 {
                                    continue;
                                }
                                acc += x.at(0, 0, y as usize, xx as usize) as f64
                                    * dense[(co * 9 + (ky * 3 + kx) as usize) as usize];
                            }
                        }
                        total += acc * probe[oi] as f64;
                        oi += 1;
                    }
                }
            }
            total
        };
        let h = 1e-3f32;
        for i in 0..16 {
            let mut xp = input.clone();
            xp.data_mut()[i] += h;
            let mut xm = input.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h as f64);
            let rel = (dx.data()[i] as f64 - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 1e-3, "dx[{i}] {} vs {fd}", dx.data()[i]);
        }
    }
}
