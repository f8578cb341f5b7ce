//! Trainable layer wrappers: each pairs parameter handles with the pure ops
//! and carries the forward cache its backward pass needs.

use rand_chacha::ChaCha8Rng;

use crate::adder::{adder_conv2d, adder_conv2d_backward, AdderFilterBank};
use crate::error::Result;
use crate::ops::{self, BnCache, Mode};
use crate::params::{kaiming_uniform, ParamId, ParamKind, ParamStore};
use crate::shift::{quantize_shift, ShiftFilterBank};
use crate::tensor::{ConvGeometry, Tensor4};

/// Convolution layer with power-of-two weights trained through continuous
/// proxies (straight-through estimator).
#[derive(Clone, Debug)]
pub struct ShiftConvLayer {
    pub name: String,
    pub geom: ConvGeometry,
    pub groups: usize,
    pub proxy: ParamId,
    pub bias: ParamId,
    pub p_min: i8,
    pub p_max: i8,
}

pub struct ShiftConvCache {
    input: Tensor4,
    dense: Vec<f32>,
}

impl ShiftConvLayer {
    pub fn init(
        name: impl Into<String>,
        geom: ConvGeometry,
        groups: usize,
        p_min: i8,
        p_max: i8,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = name.into();
        let fan_in = (geom.in_channels / groups) * geom.kernel * geom.kernel;
        let mut proxies = kaiming_uniform(rng, fan_in, geom.weight_len_grouped(groups));
        // keep initial proxies inside the representable magnitude range so the
        // starting quantization error is bounded
        let lo = 2f32.powi(p_min as i32);
        let hi = 2f32.powi(p_max as i32);
        for w in &mut proxies {
            let mag = w.abs().clamp(lo, hi);
            *w = if *w < 0.0 { -mag } else { mag };
        }
        let cig = geom.in_channels / groups;
        let proxy = store.add(
            format!("{name}.proxy"),
            ParamKind::ShiftProxy,
            vec![geom.out_channels, cig, geom.kernel, geom.kernel],
            proxies,
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            vec![geom.out_channels],
            vec![0.0; geom.out_channels],
        );
        ShiftConvLayer {
            name,
            geom,
            groups,
            proxy,
            bias,
            p_min,
            p_max,
        }
    }

    /// Quantize the current proxies into a filter bank.
    pub fn bank(&self, store: &ParamStore) -> Result<ShiftFilterBank> {
        ShiftFilterBank::from_proxies(
            self.geom,
            self.groups,
            store.data(self.proxy),
            store.data(self.bias).to_vec(),
            self.p_min,
            self.p_max,
        )
    }

    fn densify(&self, store: &ParamStore) -> Result<Vec<f32>> {
        store
            .data(self.proxy)
            .iter()
            .map(|&w| quantize_shift(w, self.p_min, self.p_max).map(|q| q.effective()))
            .collect()
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &Tensor4,
    ) -> Result<(Tensor4, ShiftConvCache)> {
        let dense = self.densify(store)?;
        let out = ops::conv2d_grouped(
            input,
            &dense,
            store.data(self.bias),
            &self.geom,
            self.groups,
        )?;
        Ok((
            out,
            ShiftConvCache {
                input: input.clone(),
                dense,
            },
        ))
    }

    pub fn forward_eval(&self, store: &ParamStore, input: &Tensor4) -> Result<Tensor4> {
        let dense = self.densify(store)?;
        ops::conv2d_grouped(
            input,
            &dense,
            store.data(self.bias),
            &self.geom,
            self.groups,
        )
    }

    /// Accumulates proxy and bias gradients into the store, returns the input
    /// gradient. The quantizer is treated as identity in the backward
    /// direction: the dense weight gradient flows straight to the proxies.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ShiftConvCache,
        upstream: &Tensor4,
    ) -> Result<Tensor4> {
        let (dx, dw, db) = ops::conv2d_backward(
            &cache.input,
            &cache.dense,
            &self.geom,
            self.groups,
            upstream,
        )?;
        store.accumulate_grad(self.proxy, &dw);
        store.accumulate_grad(self.bias, &db);
        Ok(dx)
    }
}

/// 1x1 (by default) adder convolution layer.
#[derive(Clone, Debug)]
pub struct AdderConvLayer {
    pub name: String,
    pub geom: ConvGeometry,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct AdderConvCache {
    input: Tensor4,
}

impl AdderConvLayer {
    pub fn init(
        name: impl Into<String>,
        geom: ConvGeometry,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = name.into();
        let fan_in = geom.in_channels * geom.kernel * geom.kernel;
        let weights = kaiming_uniform(rng, fan_in, geom.weight_len());
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::AdderWeight,
            vec![
                geom.out_channels,
                geom.in_channels,
                geom.kernel,
                geom.kernel,
            ],
            weights,
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            vec![geom.out_channels],
            vec![0.0; geom.out_channels],
        );
        AdderConvLayer {
            name,
            geom,
            weight,
            bias,
        }
    }

    pub fn bank(&self, store: &ParamStore) -> Result<AdderFilterBank> {
        AdderFilterBank::new(
            self.geom,
            store.data(self.weight).to_vec(),
            store.data(self.bias).to_vec(),
        )
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &Tensor4,
    ) -> Result<(Tensor4, AdderConvCache)> {
        let out = adder_conv2d(input, &self.bank(store)?)?;
        Ok((
            out,
            AdderConvCache {
                input: input.clone(),
            },
        ))
    }

    pub fn forward_eval(&self, store: &ParamStore, input: &Tensor4) -> Result<Tensor4> {
        adder_conv2d(input, &self.bank(store)?)
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AdderConvCache,
        upstream: &Tensor4,
    ) -> Result<Tensor4> {
        let bank = self.bank(store)?;
        let (dx, dw, db) = adder_conv2d_backward(&cache.input, &bank, upstream)?;
        store.accumulate_grad(self.weight, &dw);
        store.accumulate_grad(self.bias, &db);
        Ok(dx)
    }
}

/// Batch normalization with learned affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub name: String,
    pub channels: usize,
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BatchNormLayer {
    pub fn init(name: impl Into<String>, channels: usize, store: &mut ParamStore) -> Self {
        let name = name.into();
        let scale = store.add(
            format!("{name}.scale"),
            ParamKind::BnScale,
            vec![channels],
            vec![1.0; channels],
        );
        let shift = store.add(
            format!("{name}.shift"),
            ParamKind::BnShift,
            vec![channels],
            vec![0.0; channels],
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ParamKind::BnRunningMean,
            vec![channels],
            vec![0.0; channels],
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ParamKind::BnRunningVar,
            vec![channels],
            vec![1.0; channels],
        );
        BatchNormLayer {
            name,
            channels,
            scale,
            shift,
            running_mean,
            running_var,
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        input: &Tensor4,
        mode: Mode,
    ) -> Result<(Tensor4, Option<BnCache>)> {
        // running stats are updated in place during train mode; pull them out
        // to satisfy the borrow checker, then write them back
        let mut rm = store.data(self.running_mean).to_vec();
        let mut rv = store.data(self.running_var).to_vec();
        let result = ops::batch_norm_forward(
            input,
            store.data(self.scale),
            store.data(self.shift),
            &mut rm,
            &mut rv,
            mode,
            self.epsilon,
            self.momentum,
        )?;
        if mode == Mode::Train {
            store.data_mut(self.running_mean).copy_from_slice(&rm);
            store.data_mut(self.running_var).copy_from_slice(&rv);
        }
        Ok(result)
    }

    pub fn forward_eval(&self, store: &ParamStore, input: &Tensor4) -> Result<Tensor4> {
        let mut rm = store.data(self.running_mean).to_vec();
        let mut rv = store.data(self.running_var).to_vec();
        let (out, _) = ops::batch_norm_forward(
            input,
            store.data(self.scale),
            store.data(self.shift),
            &mut rm,
            &mut rv,
            Mode::Eval,
            self.epsilon,
            self.momentum,
        )?;
        Ok(out)
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BnCache, upstream: &Tensor4) -> Tensor4 {
        let (dx, dscale, dshift) =
            ops::batch_norm_backward(cache, store.data(self.scale), upstream);
        store.accumulate_grad(self.scale, &dscale);
        store.accumulate_grad(self.shift, &dshift);
        dx
    }
}

/// Dense linear classifier head (the one multiplication-based layer a network
/// keeps; the structural audit reports it separately).
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct LinearCache {
    input: Vec<f32>,
    batch: usize,
}

impl LinearLayer {
    pub fn init(
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = name.into();
        let weights = kaiming_uniform(rng, in_features, in_features * out_features);
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::LinearWeight,
            vec![out_features, in_features],
            weights,
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            vec![out_features],
            vec![0.0; out_features],
        );
        LinearLayer {
            name,
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &[f32],
        batch: usize,
    ) -> Result<(Vec<f32>, LinearCache)> {
        let out = ops::linear(
            input,
            batch,
            self.in_features,
            store.data(self.weight),
            store.data(self.bias),
        )?;
        Ok((
            out,
            LinearCache {
                input: input.to_vec(),
                batch,
            },
        ))
    }

    pub fn forward_eval(
        &self,
        store: &ParamStore,
        input: &[f32],
        batch: usize,
    ) -> Result<Vec<f32>> {
        ops::linear(
            input,
            batch,
            self.in_features,
            store.data(self.weight),
            store.data(self.bias),
        )
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LinearCache,
        upstream: &[f32],
    ) -> Vec<f32> {
        let (dx, dw, db) = ops::linear_backward(
            &cache.input,
            cache.batch,
            self.in_features,
            store.data(self.weight),
            self.out_features,
            upstream,
        );
        store.accumulate_grad(self.weight, &dw);
        store.accumulate_grad(self.bias, &db);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shift_layer_forward_matches_bank_path() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = ConvGeometry::new(3, 1, 1, 2, 4).unwrap();
        let layer = ShiftConvLayer::init("l", geom, 1, -8, 8, &mut store, &mut rng);
        let input =
            Tensor4::from_vec(1, 2, 4, 4, (0..32).map(|v| v as f32 * 0.1 - 1.5).collect()).unwrap();
        let (out, _) = layer.forward(&store, &input).unwrap();
        let via_bank = crate::shift::shift_conv2d(&input, &layer.bank(&store).unwrap()).unwrap();
        assert_eq!(out.data(), via_bank.data());
    }

    #[test]
    fn shift_layer_init_stays_in_representable_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeometry::new(3, 1, 1, 8, 8).unwrap();
        let layer = ShiftConvLayer::init("l", geom, 1, -8, 8, &mut store, &mut rng);
        for &w in store.data(layer.proxy) {
            assert!(w.abs() >= 2f32.powi(-8) && w.abs() <= 2f32.powi(8));
        }
    }

    #[test]
    fn bn_layer_updates_running_stats_only_in_train() {
        let mut store = ParamStore::new();
        let bn = BatchNormLayer::init("bn", 2, &mut store);
        let input = Tensor4::from_vec(2, 2, 2, 2, (0..16).map(|v| v as f32).collect()).unwrap();
        let rm_before = store.data(bn.running_mean).to_vec();
        bn.forward_eval(&store, &input).unwrap();
        assert_eq!(store.data(bn.running_mean), &rm_before[..]);
        bn.forward(&mut store, &input, Mode::Train).unwrap();
        assert_ne!(store.data(bn.running_mean), &rm_before[..]);
    }
}
