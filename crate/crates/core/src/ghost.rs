//! Ghost feature composition: the GhostSA module (shift-based intrinsic branch
//! concatenated with a shift+adder ghost branch), the residual GhostSA
//! bottleneck, and the GhostSANet builder with width multiplier alpha.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{scale_channels, NetworkSpec};
use crate::error::{Error, Result};
use crate::layers::{
    AdderConvCache, AdderConvLayer, BatchNormLayer, LinearCache, LinearLayer, ShiftConvCache,
    ShiftConvLayer,
};
use crate::ops::{self, BnCache, Mode};
use crate::params::{ParamKind, ParamStore};
use crate::shift::{DEFAULT_P_MAX, DEFAULT_P_MIN};
use crate::tensor::{ConvGeometry, Tensor4};

/// Channel multiple the final shift conv expands to before global pooling.
pub const HEAD_EXPANSION: usize = 4;

/// Partition `c_o` output channels into `m1` intrinsic and `m2 = c_o - m1`
/// ghost channels with `m1 = ceil(c_o / gamma)`.
pub fn split_channels(c_o: usize, gamma: usize) -> Result<(usize, usize)> {
    if gamma < 2 {
        return Err(Error::Config(format!("gamma must be >= 2, got {gamma}")));
    }
    if c_o < 2 {
        return Err(Error::Config(format!(
            "channel split needs out_channels >= 2, got {c_o}"
        )));
    }
    let m1 = c_o.div_ceil(gamma);
    let m2 = c_o - m1;
    Ok((m1, m2))
}

/// Configuration of one GhostSA module.
///
/// The intrinsic branch is a d x d shift convolution producing `m1` channels;
/// the ghost branch derives `m2` channels from them through a depthwise k x k
/// shift layer (channel multiplier `ceil(m2 / m1)`) and a 1x1 adder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GhostSAConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub gamma: usize,
    pub intrinsic_kernel: usize,
    pub ghost_kernel: usize,
    pub stride: usize,
}

impl GhostSAConfig {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        gamma: usize,
        stride: usize,
    ) -> Result<Self> {
        GhostSAConfig::with_kernels(in_channels, out_channels, gamma, 1, 3, stride)
    }

    pub fn with_kernels(
        in_channels: usize,
        out_channels: usize,
        gamma: usize,
        intrinsic_kernel: usize,
        ghost_kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        split_channels(out_channels, gamma)?;
        if in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if intrinsic_kernel % 2 == 0 || ghost_kernel % 2 == 0 {
            return Err(Error::Config(
                "intrinsic and ghost kernels must be odd so padding preserves dims".into(),
            ));
        }
        if stride < 1 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(GhostSAConfig {
            in_channels,
            out_channels,
            gamma,
            intrinsic_kernel,
            ghost_kernel,
            stride,
        })
    }

    pub fn split(&self) -> (usize, usize) {
        split_channels(self.out_channels, self.gamma).expect("validated at construction")
    }

    /// Depthwise channel multiplier of the ghost branch.
    pub fn ghost_multiplier(&self) -> usize {
        let (m1, m2) = self.split();
        m2.div_ceil(m1)
    }
}

/// One GhostSA module with its batch norms.
#[derive(Clone, Debug)]
pub struct GhostSaModule {
    pub config: GhostSAConfig,
    pub intrinsic: ShiftConvLayer,
    pub bn_intrinsic: BatchNormLayer,
    pub ghost_dw: ShiftConvLayer,
    pub bn_dw: BatchNormLayer,
    pub ghost_pw: AdderConvLayer,
    pub bn_pw: BatchNormLayer,
}

pub struct GhostSaCache {
    intrinsic: ShiftConvCache,
    bn_intrinsic: BnCache,
    ghost_dw: ShiftConvCache,
    bn_dw: BnCache,
    ghost_pw: AdderConvCache,
    bn_pw: BnCache,
    m1: usize,
}

impl GhostSaModule {
    pub fn init(
        name: &str,
        config: GhostSAConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (m1, m2) = config.split();
        let mult = config.ghost_multiplier();
        let d = config.intrinsic_kernel;
        let k = config.ghost_kernel;
        let intrinsic_geom =
            ConvGeometry::new(d, config.stride, (d - 1) / 2, config.in_channels, m1)?;
        let dw_geom = ConvGeometry::new(k, 1, (k - 1) / 2, m1, m1 * mult)?;
        let pw_geom = ConvGeometry::new(1, 1, 0, m1 * mult, m2)?;
        Ok(GhostSaModule {
            config,
            intrinsic: ShiftConvLayer::init(
                format!("{name}.intrinsic"),
                intrinsic_geom,
                1,
                DEFAULT_P_MIN,
                DEFAULT_P_MAX,
                store,
                rng,
            ),
            bn_intrinsic: BatchNormLayer::init(format!("{name}.bn_int"), m1, store),
            ghost_dw: ShiftConvLayer::init(
                format!("{name}.ghost_dw"),
                dw_geom,
                m1,
                DEFAULT_P_MIN,
                DEFAULT_P_MAX,
                store,
                rng,
            ),
            bn_dw: BatchNormLayer::init(format!("{name}.bn_dw"), m1 * mult, store),
            ghost_pw: AdderConvLayer::init(format!("{name}.ghost_pw"), pw_geom, store, rng),
            bn_pw: BatchNormLayer::init(format!("{name}.bn_pw"), m2, store),
        })
    }

    /// Intrinsic branch then ghost branch, concatenated `[intrinsic, ghost]`.
    pub fn forward_train(
        &self,
        store: &mut ParamStore,
        input: &Tensor4,
    ) -> Result<(Tensor4, GhostSaCache)> {
        let (m1, _) = self.config.split();
        let (oi_raw, c_intrinsic) = self.intrinsic.forward(store, input)?;
        let (oi, c_bn_int) = self.bn_intrinsic.forward(store, &oi_raw, Mode::Train)?;
        let c_bn_int = c_bn_int.expect("train mode returns cache");

        let (dw_raw, c_dw) = self.ghost_dw.forward(store, &oi)?;
        let (dw, c_bn_dw) = self.bn_dw.forward(store, &dw_raw, Mode::Train)?;
        let c_bn_dw = c_bn_dw.expect("train mode returns cache");

        let (pw_raw, c_pw) = self.ghost_pw.forward(store, &dw)?;
        let (ghost, c_bn_pw) = self.bn_pw.forward(store, &pw_raw, Mode::Train)?;
        let c_bn_pw = c_bn_pw.expect("train mode returns cache");

        let out = Tensor4::concat_channels(&oi, &ghost)?;
        Ok((
            out,
            GhostSaCache {
                intrinsic: c_intrinsic,
                bn_intrinsic: c_bn_int,
                ghost_dw: c_dw,
                bn_dw: c_bn_dw,
                ghost_pw: c_pw,
                bn_pw: c_bn_pw,
                m1,
            },
        ))
    }

    pub fn forward_eval(&self, store: &ParamStore, input: &Tensor4) -> Result<Tensor4> {
        let oi_raw = self.intrinsic.forward_eval(store, input)?;
        let oi = self.bn_intrinsic.forward_eval(store, &oi_raw)?;
        let dw_raw = self.ghost_dw.forward_eval(store, &oi)?;
        let dw = self.bn_dw.forward_eval(store, &dw_raw)?;
        let pw_raw = self.ghost_pw.forward_eval(store, &dw)?;
        let ghost = self.bn_pw.forward_eval(store, &pw_raw)?;
        Tensor4::concat_channels(&oi, &ghost)
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &GhostSaCache,
        upstream: &Tensor4,
    ) -> Result<Tensor4> {
        let (d_int_direct, d_ghost) = upstream.split_at_channel(cache.m1)?;

        let d_pw_raw = self.bn_pw.backward(store, &cache.bn_pw, &d_ghost);
        let d_dw = self.ghost_pw.backward(store, &cache.ghost_pw, &d_pw_raw)?;
        let d_dw_raw = self.bn_dw.backward(store, &cache.bn_dw, &d_dw);
        let d_int_from_ghost = self.ghost_dw.backward(store, &cache.ghost_dw, &d_dw_raw)?;

        let mut d_int = d_int_direct;
        add_into(&mut d_int, &d_int_from_ghost)?;
        let d_int_raw = self
            .bn_intrinsic
            .backward(store, &cache.bn_intrinsic, &d_int);
        self.intrinsic.backward(store, &cache.intrinsic, &d_int_raw)
    }
}

fn add_into(target: &mut Tensor4, other: &Tensor4) -> Result<()> {
    if target.shape() != other.shape() {
        return Err(Error::Dimension {
            axis: "residual add",
            expected: target.len(),
            got: other.len(),
        });
    }
    for (t, o) in target.data_mut().iter_mut().zip(other.data()) {
        *t += o;
    }
    Ok(())
}

/// Residual block of two stacked GhostSA modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckConfig {
    pub in_channels: usize,
    pub expansion_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub gamma: usize,
}

impl BottleneckConfig {
    pub fn new(
        in_channels: usize,
        expansion_channels: usize,
        out_channels: usize,
        stride: usize,
        gamma: usize,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!(
                "bottleneck stride must be 1 or 2, got {stride}"
            )));
        }
        Ok(BottleneckConfig {
            in_channels,
            expansion_channels,
            out_channels,
            stride,
            gamma,
        })
    }
}

/// GhostSA bottleneck: module1 expands, ReLU, (max-pool when stride 2),
/// module2 projects, plus a shortcut. The shortcut max-pools when stride 2 and
/// goes through a 1x1 shift conv + BN when channel counts differ, so the whole
/// block stays multiplication-free.
#[derive(Clone, Debug)]
pub struct GhostSaBottleneck {
    pub config: BottleneckConfig,
    pub module1: GhostSaModule,
    pub module2: GhostSaModule,
    pub shortcut: Option<(ShiftConvLayer, BatchNormLayer)>,
}

pub struct BottleneckCache {
    m1: GhostSaCache,
    expanded: Tensor4,
    pool_main: Option<(Vec<usize>, (usize, usize, usize, usize))>,
    m2: GhostSaCache,
    pool_shortcut: Option<(Vec<usize>, (usize, usize, usize, usize))>,
    shortcut: Option<(ShiftConvCache, BnCache)>,
}

impl GhostSaBottleneck {
    pub fn init(
        name: &str,
        config: BottleneckConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let module1 = GhostSaModule::init(
            &format!("{name}.m1"),
            GhostSAConfig::new(
                config.in_channels,
                config.expansion_channels,
                config.gamma,
                1,
            )?,
            store,
            rng,
        )?;
        let module2 = GhostSaModule::init(
            &format!("{name}.m2"),
            GhostSAConfig::new(
                config.expansion_channels,
                config.out_channels,
                config.gamma,
                1,
            )?,
            store,
            rng,
        )?;
        let shortcut = if config.in_channels != config.out_channels {
            let geom = ConvGeometry::new(1, 1, 0, config.in_channels, config.out_channels)?;
            let conv = ShiftConvLayer::init(
                format!("{name}.shortcut.conv"),
                geom,
                1,
                DEFAULT_P_MIN,
                DEFAULT_P_MAX,
                store,
                rng,
            );
            let bn =
                BatchNormLayer::init(format!("{name}.shortcut.bn"), config.out_channels, store);
            Some((conv, bn))
        } else {
            None
        };
        Ok(GhostSaBottleneck {
            config,
            module1,
            module2,
            shortcut,
        })
    }

    pub fn forward_train(
        &self,
        store: &mut ParamStore,
        input: &Tensor4,
    ) -> Result<(Tensor4, BottleneckCache)> {
        let (expanded, c_m1) = self.module1.forward_train(store, input)?;
        let activated = ops::relu(&expanded);

        let (main_in, pool_main) = if self.config.stride == 2 {
            let (pooled, idx) = ops::maxpool2d_with_indices(&activated, 2, 2)?;
            (pooled, Some((idx, activated.shape())))
        } else {
            (activated, None)
        };
        let (main_out, c_m2) = self.module2.forward_train(store, &main_in)?;

        let (sc_in, pool_shortcut) = if self.config.stride == 2 {
            let (pooled, idx) = ops::maxpool2d_with_indices(input, 2, 2)?;
            (pooled, Some((idx, input.shape())))
        } else {
            (input.clone(), None)
        };
        let (sc_out, shortcut_cache) = match &self.shortcut {
            Some((conv, bn)) => {
                let (c_out, c_conv) = conv.forward(store, &sc_in)?;
                let (b_out, c_bn) = bn.forward(store, &c_out, Mode::Train)?;
                (
                    b_out,
                    Some((c_conv, c_bn.expect("train mode returns cache"))),
                )
            }
            None => (sc_in, None),
        };

        let mut out = main_out;
        add_into(&mut out, &sc_out)?;
        Ok((
            out,
            BottleneckCache {
                m1: c_m1,
                expanded,
                pool_main,
                m2: c_m2,
                pool_shortcut,
                shortcut: shortcut_cache,
            },
        ))
    }

    pub fn forward_eval(&self, store: &ParamStore, input: &Tensor4) -> Result<Tensor4> {
        let expanded = self.module1.forward_eval(store, input)?;
        let activated = ops::relu(&expanded);
        let main_in = if self.config.stride == 2 {
            ops::maxpool2d(&activated, 2, 2)?
        } else {
            activated
        };
        let main_out = self.module2.forward_eval(store, &main_in)?;

        let sc_in = if self.config.stride == 2 {
            ops::maxpool2d(input, 2, 2)?
        } else {
            input.clone()
        };
        let sc_out = match &self.shortcut {
            Some((conv, bn)) => {
                let c = conv.forward_eval(store, &sc_in)?;
                bn.forward_eval(store, &c)?
            }
            None => sc_in,
        };
        let mut out = main_out;
        add_into(&mut out, &sc_out)?;
        Ok(out)
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &BottleneckCache,
        upstream: &Tensor4,
    ) -> Result<Tensor4> {
        // main path
        let d_main_in = self.module2.backward(store, &cache.m2, upstream)?;
        let d_activated = match &cache.pool_main {
            Some((idx, shape)) => ops::maxpool2d_backward(*shape, idx, &d_main_in),
            None => d_main_in,
        };
        let d_expanded = ops::relu_backward(&cache.expanded, &d_activated);
        let mut dx = self.module1.backward(store, &cache.m1, &d_expanded)?;

        // shortcut path
        let d_sc_in = match (&self.shortcut, &cache.shortcut) {
            (Some((conv, bn)), Some((c_conv, c_bn))) => {
                let d_conv_out = bn.backward(store, c_bn, upstream);
                conv.backward(store, c_conv, &d_conv_out)?
            }
            _ => upstream.clone(),
        };
        let d_input_sc = match &cache.pool_shortcut {
            Some((idx, shape)) => ops::maxpool2d_backward(*shape, idx, &d_sc_in),
            None => d_sc_in,
        };
        add_into(&mut dx, &d_input_sc)?;
        Ok(dx)
    }
}

/// Complete network: shift stem, GhostSA bottleneck stages, shift head with
/// hard-swish, global average pooling, and a dense classifier.
#[derive(Clone, Debug)]
pub struct GhostSaNet {
    pub input_channels: usize,
    pub classes: usize,
    pub stem_conv: ShiftConvLayer,
    pub stem_bn: BatchNormLayer,
    pub blocks: Vec<GhostSaBottleneck>,
    pub head_conv: ShiftConvLayer,
    pub head_bn: BatchNormLayer,
    pub classifier: LinearLayer,
}

pub struct NetCache {
    stem_conv: ShiftConvCache,
    stem_bn: BnCache,
    stem_out: Tensor4,
    blocks: Vec<BottleneckCache>,
    head_conv: ShiftConvCache,
    head_bn: BnCache,
    head_out: Tensor4,
    gap_in_shape: (usize, usize, usize, usize),
    linear: LinearCache,
}

/// A built network together with its parameters and the spec that produced it.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub net: GhostSaNet,
}

/// Structural parameter census. `dense_conv_banks` counts multiplication-based
/// convolution filter banks; a built GhostSANet always reports zero, with the
/// dense classifier head tallied separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub shift_conv_banks: usize,
    pub adder_banks: usize,
    pub dense_conv_banks: usize,
    pub linear_heads: usize,
    pub shift_weights: usize,
    pub adder_weights: usize,
    pub linear_weights: usize,
    pub bias_params: usize,
    pub bn_affine_params: usize,
    pub bn_running_stats: usize,
    pub trainable_params: usize,
    pub total_params: usize,
}

/// Build a [`Model`] from a validated spec, applying the width multiplier.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let stem_ch = scale_channels(spec.alpha, spec.stem_channels);
    let stem_geom = ConvGeometry::new(3, 1, 1, spec.input_channels, stem_ch)?;
    let stem_conv = ShiftConvLayer::init(
        "stem.conv",
        stem_geom,
        1,
        DEFAULT_P_MIN,
        DEFAULT_P_MAX,
        &mut store,
        &mut rng,
    );
    let stem_bn = BatchNormLayer::init("stem.bn", stem_ch, &mut store);

    let mut blocks = Vec::new();
    let mut prev_out = stem_ch;
    for (i, st) in spec.stages.iter().enumerate() {
        let cfg = BottleneckConfig::new(
            prev_out,
            scale_channels(spec.alpha, st.expansion_channels),
            scale_channels(spec.alpha, st.out_channels),
            st.stride,
            spec.stage_gamma(st),
        )?;
        blocks.push(GhostSaBottleneck::init(
            &format!("block{}", i + 1),
            cfg,
            &mut store,
            &mut rng,
        )?);
        prev_out = cfg.out_channels;
    }

    let head_ch = HEAD_EXPANSION * prev_out;
    let head_geom = ConvGeometry::new(1, 1, 0, prev_out, head_ch)?;
    let head_conv = ShiftConvLayer::init(
        "head.conv",
        head_geom,
        1,
        DEFAULT_P_MIN,
        DEFAULT_P_MAX,
        &mut store,
        &mut rng,
    );
    let head_bn = BatchNormLayer::init("head.bn", head_ch, &mut store);
    let classifier = LinearLayer::init("classifier", head_ch, spec.classes, &mut store, &mut rng);

    Ok(Model {
        spec: spec.clone(),
        store,
        net: GhostSaNet {
            input_channels: spec.input_channels,
            classes: spec.classes,
            stem_conv,
            stem_bn,
            blocks,
            head_conv,
            head_bn,
            classifier,
        },
    })
}

impl GhostSaNet {
    pub fn forward_train(
        &self,
        store: &mut ParamStore,
        input: &Tensor4,
    ) -> Result<(Vec<f32>, NetCache)> {
        let (stem_raw, c_stem) = self.stem_conv.forward(store, input)?;
        let (stem_bn_out, c_stem_bn) = self.stem_bn.forward(store, &stem_raw, Mode::Train)?;
        let c_stem_bn = c_stem_bn.expect("train mode returns cache");
        let mut x = ops::relu(&stem_bn_out);

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_train(store, &x)?;
            block_caches.push(c);
            x = y;
        }

        let (head_raw, c_head) = self.head_conv.forward(store, &x)?;
        let (head_bn_out, c_head_bn) = self.head_bn.forward(store, &head_raw, Mode::Train)?;
        let c_head_bn = c_head_bn.expect("train mode returns cache");
        let pooled_in = ops::hard_swish(&head_bn_out);
        let gap = ops::global_avg_pool(&pooled_in);
        let batch = gap.batch();
        let (logits, c_linear) = self.classifier.forward(store, gap.data(), batch)?;

        Ok((
            logits,
            NetCache {
                stem_conv: c_stem,
                stem_bn: c_stem_bn,
                stem_out: stem_bn_out,
                blocks: block_caches,
                head_conv: c_head,
                head_bn: c_head_bn,
                head_out: head_bn_out,
                gap_in_shape: pooled_in.shape(),
                linear: c_linear,
            },
        ))
    }

    pub fn forward_eval(&self, store: &ParamStore, input: &Tensor4) -> Result<Vec<f32>> {
        let stem_raw = self.stem_conv.forward_eval(store, input)?;
        let mut x = ops::relu(&self.stem_bn.forward_eval(store, &stem_raw)?);
        for b in &self.blocks {
            x = b.forward_eval(store, &x)?;
        }
        let head_raw = self.head_conv.forward_eval(store, &x)?;
        let head = ops::hard_swish(&self.head_bn.forward_eval(store, &head_raw)?);
        let gap = ops::global_avg_pool(&head);
        let batch = gap.batch();
        self.classifier.forward_eval(store, gap.data(), batch)
    }

    /// Chain the per-layer backward ops in reverse; parameter gradients
    /// accumulate into the store.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &NetCache,
        dlogits: &[f32],
    ) -> Result<()> {
        let d_gap_flat = self.classifier.backward(store, &cache.linear, dlogits);
        let (n, c, h, w) = cache.gap_in_shape;
        let d_gap = Tensor4::from_vec(n, c, 1, 1, d_gap_flat)?;
        let d_pooled = ops::global_avg_pool_backward((n, c, h, w), &d_gap);
        let d_head_bn_out = ops::hard_swish_backward(&cache.head_out, &d_pooled);
        let d_head_raw = self.head_bn.backward(store, &cache.head_bn, &d_head_bn_out);
        let mut dx = self
            .head_conv
            .backward(store, &cache.head_conv, &d_head_raw)?;

        for (b, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            dx = b.backward(store, c, &dx)?;
        }

        let d_stem_bn_out = ops::relu_backward(&cache.stem_out, &dx);
        let d_stem_raw = self.stem_bn.backward(store, &cache.stem_bn, &d_stem_bn_out);
        self.stem_conv
            .backward(store, &cache.stem_conv, &d_stem_raw)?;
        Ok(())
    }
}

impl Model {
    pub fn forward_eval(&self, input: &Tensor4) -> Result<Vec<f32>> {
        self.net.forward_eval(&self.store, input)
    }

    pub fn census(&self) -> Census {
        let mut census = Census::default();
        census.shift_conv_banks += 1; // stem
        for b in &self.net.blocks {
            // each module carries an intrinsic and a depthwise shift bank
            // plus one adder bank
            census.shift_conv_banks += 4;
            census.adder_banks += 2;
            if b.shortcut.is_some() {
                census.shift_conv_banks += 1;
            }
        }
        census.shift_conv_banks += 1; // head
        census.linear_heads = 1;
        // dense multiplying conv banks cannot be constructed in this topology
        census.dense_conv_banks = 0;

        for e in self.store.entries() {
            match e.kind {
                ParamKind::ShiftProxy => census.shift_weights += e.len(),
                ParamKind::AdderWeight => census.adder_weights += e.len(),
                ParamKind::LinearWeight => census.linear_weights += e.len(),
                ParamKind::Bias => census.bias_params += e.len(),
                ParamKind::BnScale | ParamKind::BnShift => census.bn_affine_params += e.len(),
                ParamKind::BnRunningMean | ParamKind::BnRunningVar => {
                    census.bn_running_stats += e.len()
                }
            }
            census.total_params += e.len();
        }
        census.trainable_params = self.store.trainable_count();
        census
    }
}
