//! Kernel latency microbenchmarks: multiply vs shift vs adder convolution on
//! the host CPU.
//!
//! The harness times single-threaded forward passes on fixed-seed inputs,
//! reports robust statistics (median, MAD, coefficient of variation) and
//! verifies on every run that the timed kernel's output checksum equals the
//! library kernel's. It never asserts an ordering between kernels: relative
//! latency is a property of the host, the harness only measures it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsan_core::adder::{adder_conv2d, AdderFilterBank};
use gsan_core::error::{Error, Result};
use gsan_core::ops::{self, dot, im2col};
use gsan_core::shift::{shift_conv2d, shift_mul, ShiftFilterBank, ShiftWeight};
use gsan_core::tensor::{ConvGeometry, Tensor4};

/// Which arithmetic the convolution kernel uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum KernelTag {
    Mul,
    Shift,
    Add,
}

impl KernelTag {
    pub fn name(self) -> &'static str {
        match self {
            KernelTag::Mul => "mul",
            KernelTag::Shift => "shift",
            KernelTag::Add => "add",
        }
    }

    pub fn all() -> [KernelTag; 3] {
        [KernelTag::Mul, KernelTag::Shift, KernelTag::Add]
    }
}

/// One benchmark geometry: square kernel, equal in/out channels, square input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct BenchCase {
    pub kernel: usize,
    pub channels: usize,
    pub spatial: usize,
    pub depthwise: bool,
}

impl BenchCase {
    pub fn geometry(&self) -> Result<(ConvGeometry, usize)> {
        let pad = (self.kernel - 1) / 2;
        let geom = ConvGeometry::new(self.kernel, 1, pad, self.channels, self.channels)?;
        let groups = if self.depthwise { self.channels } else { 1 };
        geom.validate_groups(groups)?;
        Ok((geom, groups))
    }

    pub fn label(&self) -> String {
        format!(
            "k{}{} c{} s{}",
            self.kernel,
            if self.depthwise { "dw" } else { "" },
            self.channels,
            self.spatial
        )
    }
}

/// Timing statistics for one (kernel, geometry) pair.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub tag: KernelTag,
    pub case: BenchCase,
    pub repeats: usize,
    pub warmups: usize,
    /// Median time of one kernel invocation.
    pub median_ns: f64,
    pub mad_ns: f64,
    pub cv_percent: f64,
    pub checksum: f64,
    pub host: String,
}

impl BenchRecord {
    /// Tab-separated row: tag, k, channels, spatial, median_ns, mad_ns, cv_percent.
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.1}\t{:.1}\t{:.2}",
            self.tag.name(),
            self.case.kernel,
            self.case.channels,
            self.case.spatial,
            self.median_ns,
            self.mad_ns,
            self.cv_percent
        )
    }
}

/// Suite configuration: shared repeat counts plus the list of geometries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuiteConfig {
    pub repeats: usize,
    pub warmups: usize,
    pub cases: Vec<BenchCase>,
}

/// The motivating geometry pair: a k = 3 depthwise stage and a k = 1
/// pointwise stage, the two halves of the separable ghost branch.
pub fn default_suite() -> SuiteConfig {
    SuiteConfig {
        repeats: 100,
        warmups: 10,
        cases: vec![
            BenchCase {
                kernel: 3,
                channels: 64,
                spatial: 32,
                depthwise: true,
            },
            BenchCase {
                kernel: 1,
                channels: 64,
                spatial: 32,
                depthwise: false,
            },
        ],
    }
}

/// Parse a suite file: top-level `repeats` / `warmups`, then `[case]`
/// sections with `k`, `channels`, `spatial`, `depthwise`.
pub fn parse_suite(text: &str) -> Result<SuiteConfig> {
    let mut cfg = SuiteConfig {
        repeats: 100,
        warmups: 10,
        cases: Vec::new(),
    };
    let mut in_case = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if content == "[case]" {
            cfg.cases.push(BenchCase {
                kernel: 3,
                channels: 64,
                spatial: 32,
                depthwise: false,
            });
            in_case = true;
            continue;
        }
        let eq = content.find('=').ok_or(Error::Parse {
            line,
            message: format!("expected key = value, got {content:?}"),
        })?;
        let key = content[..eq].trim();
        let value = content[eq + 1..].trim();
        let parse_n = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("{key} must be an integer, got {v:?}"),
            })
        };
        match (in_case, key) {
            (false, "repeats") => cfg.repeats = parse_n(value)?,
            (false, "warmups") => cfg.warmups = parse_n(value)?,
            (true, "k") => cfg.cases.last_mut().unwrap().kernel = parse_n(value)?,
            (true, "channels") => cfg.cases.last_mut().unwrap().channels = parse_n(value)?,
            (true, "spatial") => cfg.cases.last_mut().unwrap().spatial = parse_n(value)?,
            (true, "depthwise") => {
                cfg.cases.last_mut().unwrap().depthwise = match value {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(Error::Parse {
                            line,
                            message: format!("depthwise must be true or false, got {other:?}"),
                        })
                    }
                }
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "unknown key {key} in {} section",
                        if in_case { "[case]" } else { "top-level" }
                    ),
                })
            }
        }
    }
    if cfg.cases.is_empty() {
        return Err(Error::Bench("suite has no [case] sections".into()));
    }
    Ok(cfg)
}

/// CPU model, logical core count and architecture of this machine.
pub fn host_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("{model} ({cores} threads, {})", std::env::consts::ARCH)
}

/// Mirror of the library dot product with shift products, kept structurally
/// identical to [`gsan_core::ops::dot`] so sums are bit-identical.
#[inline]
fn dot_shift(x: &[f32], s: &[i8], p: &[i8]) -> f32 {
    debug_assert_eq!(x.len(), s.len());
    let n = x.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for i in 0..chunks {
        let j = i * 4;
        s0 += shift_mul(x[j], s[j], p[j]);
        s1 += shift_mul(x[j + 1], s[j + 1], p[j + 1]);
        s2 += shift_mul(x[j + 2], s[j + 2], p[j + 2]);
        s3 += shift_mul(x[j + 3], s[j + 3], p[j + 3]);
    }
    let mut tail = 0.0f32;
    for j in chunks * 4..n {
        tail += shift_mul(x[j], s[j], p[j]);
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Shift convolution realized by exponent-field arithmetic instead of float
/// multiplies. Bit-identical to [`shift_conv2d`] by construction.
pub fn shift_conv_direct(input: &Tensor4, bank: &ShiftFilterBank) -> Result<Tensor4> {
    let geom = &bank.geometry;
    let groups = bank.groups;
    let (h_out, w_out) = geom.output_hw(input.height(), input.width())?;
    let n = input.batch();
    let cig = geom.in_channels / groups;
    let cog = geom.out_channels / groups;
    let patch = cig * geom.kernel * geom.kernel;
    let n_pos = h_out * w_out;

    let s_all: Vec<i8> = bank.weights.iter().map(|w| w.s).collect();
    let p_all: Vec<i8> = bank.weights.iter().map(|w| w.p).collect();

    let mut out = Tensor4::zeros(n, geom.out_channels, h_out, w_out);
    let mut col = vec![0.0f32; n_pos * patch];
    for ni in 0..n {
        for g in 0..groups {
            im2col(input, ni, g * cig, cig, geom, h_out, w_out, &mut col);
            for m in 0..cog {
                let co = g * cog + m;
                let s_row = &s_all[co * patch..(co + 1) * patch];
                let p_row = &p_all[co * patch..(co + 1) * patch];
                let b = bank.bias[co];
                let base = out.index(ni, co, 0, 0);
                let plane = &mut out.data_mut()[base..base + n_pos];
                for (pos, o) in plane.iter_mut().enumerate() {
                    *o = dot_shift(&col[pos * patch..(pos + 1) * patch], s_row, p_row) + b;
                }
            }
        }
    }
    Ok(out)
}

/// Mirror of the library l1 patch distance, same structure as
/// [`gsan_core::adder::l1_distance`].
#[inline]
fn dot_l1(a: &[f32], b: &[f32]) -> f32 {
    gsan_core::adder::l1_distance(a, b)
}

struct KernelSetup {
    input: Tensor4,
    dense: Vec<f32>,
    shift: ShiftFilterBank,
    adder: AdderFilterBank,
    geom: ConvGeometry,
    groups: usize,
}

/// Preallocated buffers so the timed region never touches the allocator;
/// allocation tails would otherwise dominate the variance.
struct Scratch {
    col: Vec<f32>,
    out: Tensor4,
}

impl Scratch {
    fn for_setup(setup: &KernelSetup) -> Result<Self> {
        let geom = &setup.geom;
        let (h_out, w_out) = geom.output_hw(setup.input.height(), setup.input.width())?;
        // the ungrouped patch is the largest layout any kernel needs
        let patch = geom.in_channels * geom.kernel * geom.kernel;
        Ok(Scratch {
            col: vec![0.0; h_out * w_out * patch],
            out: Tensor4::zeros(setup.input.batch(), geom.out_channels, h_out, w_out),
        })
    }
}

fn build_setup(case: &BenchCase, seed: u64) -> Result<KernelSetup> {
    let (geom, groups) = case.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor4::from_vec(
        1,
        case.channels,
        case.spatial,
        case.spatial,
        (0..case.channels * case.spatial * case.spatial)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect(),
    )?;
    let weights: Vec<ShiftWeight> = (0..geom.weight_len_grouped(groups))
        .map(|_| {
            let s = [-1i8, 1][rng.random_range(0..2)];
            let p = rng.random_range(-4i8..=2);
            ShiftWeight {
                s,
                p,
                proxy: s as f32 * 2f32.powi(p as i32),
            }
        })
        .collect();
    let bias: Vec<f32> = (0..geom.out_channels)
        .map(|_| rng.random_range(-0.2f32..0.2))
        .collect();
    let shift = ShiftFilterBank::new(geom, groups, weights, bias.clone())?;
    let dense = shift.densify();
    // adder kernels are dense banks; reuse the same geometry but grouped
    // adders are not part of the ghost design, so use groups = 1 weights
    let adder_geom = geom;
    let adder_weights: Vec<f32> = (0..adder_geom.weight_len())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let adder = AdderFilterBank::new(adder_geom, adder_weights, bias)?;
    Ok(KernelSetup {
        input,
        dense,
        shift,
        adder,
        geom,
        groups,
    })
}

fn checksum(t: &Tensor4) -> f64 {
    t.data().iter().map(|&v| v as f64).sum()
}

/// One forward pass into preallocated scratch. All three kernels share this
/// loop structure (im2col gather, inner product per output channel and
/// position), so they move the same data and differ only in arithmetic.
fn run_kernel_into(tag: KernelTag, setup: &KernelSetup, scratch: &mut Scratch) -> Result<()> {
    let geom = &setup.geom;
    let (h_out, w_out) = geom.output_hw(setup.input.height(), setup.input.width())?;
    let n_pos = h_out * w_out;
    // the adder bank is never grouped; shift and mul follow the case's groups
    let groups = match tag {
        KernelTag::Add => 1,
        _ => setup.groups,
    };
    let cig = geom.in_channels / groups;
    let cog = geom.out_channels / groups;
    let patch = cig * geom.kernel * geom.kernel;
    let col = &mut scratch.col[..n_pos * patch];
    let out = &mut scratch.out;

    let (s_all, p_all): (Vec<i8>, Vec<i8>) = match tag {
        KernelTag::Shift => (
            setup.shift.weights.iter().map(|w| w.s).collect(),
            setup.shift.weights.iter().map(|w| w.p).collect(),
        ),
        _ => (Vec::new(), Vec::new()),
    };

    for ni in 0..setup.input.batch() {
        for g in 0..groups {
            im2col(&setup.input, ni, g * cig, cig, geom, h_out, w_out, col);
            for m in 0..cog {
                let co = g * cog + m;
                let base = out.index(ni, co, 0, 0);
                match tag {
                    KernelTag::Mul => {
                        let w_row = &setup.dense[co * patch..(co + 1) * patch];
                        let b = setup.shift.bias[co];
                        let plane = &mut out.data_mut()[base..base + n_pos];
                        for (pos, o) in plane.iter_mut().enumerate() {
                            *o = dot(&col[pos * patch..(pos + 1) * patch], w_row) + b;
                        }
                    }
                    KernelTag::Shift => {
                        let s_row = &s_all[co * patch..(co + 1) * patch];
                        let p_row = &p_all[co * patch..(co + 1) * patch];
                        let b = setup.shift.bias[co];
                        let plane = &mut out.data_mut()[base..base + n_pos];
                        for (pos, o) in plane.iter_mut().enumerate() {
                            *o = dot_shift(&col[pos * patch..(pos + 1) * patch], s_row, p_row) + b;
                        }
                    }
                    KernelTag::Add => {
                        let w_row = &setup.adder.weights[co * patch..(co + 1) * patch];
                        let b = setup.adder.bias[co];
                        let plane = &mut out.data_mut()[base..base + n_pos];
                        for (pos, o) in plane.iter_mut().enumerate() {
                            *o = b - dot_l1(&col[pos * patch..(pos + 1) * patch], w_row);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Library-path checksum the timed kernel must reproduce exactly.
fn reference_checksum(tag: KernelTag, setup: &KernelSetup) -> Result<f64> {
    let out = match tag {
        KernelTag::Mul => ops::conv2d_grouped(
            &setup.input,
            &setup.dense,
            &setup.shift.bias,
            &setup.geom,
            setup.groups,
        )?,
        KernelTag::Shift => shift_conv2d(&setup.input, &setup.shift)?,
        KernelTag::Add => adder_conv2d(&setup.input, &setup.adder)?,
    };
    Ok(checksum(&out))
}

fn timer_tick_ns() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        let d = (b - a).as_nanos() as f64;
        if d > 0.0 && d < best {
            best = d;
        }
    }
    best.max(1.0)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Duration each timed sample should cover. Interference on shared hosts
/// arrives in bursts of tens of milliseconds; samples comfortably longer than
/// a burst average over them instead of inflating the variance.
const TARGET_SAMPLE_NS: f64 = 1.5e8;

/// Time one kernel at one geometry.
///
/// Each of the `repeats` samples times a small batch of kernel invocations
/// (calibrated to roughly [`TARGET_SAMPLE_NS`]) and divides by the batch size,
/// so `median_ns` is per invocation. Warmup samples never enter statistics.
/// Every invocation's output checksum is compared against the library
/// kernel's; a mismatch aborts the run.
pub fn bench_kernel(
    tag: KernelTag,
    case: &BenchCase,
    repeats: usize,
    warmups: usize,
    seed: u64,
) -> Result<BenchRecord> {
    bench_kernel_with_target(tag, case, repeats, warmups, seed, TARGET_SAMPLE_NS)
}

/// [`bench_kernel`] with an explicit per-sample duration target; tests use a
/// short target to stay fast.
pub fn bench_kernel_with_target(
    tag: KernelTag,
    case: &BenchCase,
    repeats: usize,
    warmups: usize,
    seed: u64,
    target_sample_ns: f64,
) -> Result<BenchRecord> {
    if repeats < 30 {
        return Err(Error::Bench(format!(
            "repeats must be >= 30 for a reportable record, got {repeats}"
        )));
    }
    if warmups < 5 {
        return Err(Error::Bench(format!("warmups must be >= 5, got {warmups}")));
    }
    let setup = build_setup(case, seed)?;
    let mut scratch = Scratch::for_setup(&setup)?;
    let want_checksum = reference_checksum(tag, &setup)?;

    // calibrate inner batch size so one sample lasts about TARGET_SAMPLE_NS
    let t0 = Instant::now();
    run_kernel_into(tag, &setup, &mut scratch)?;
    let single_ns = (t0.elapsed().as_nanos() as f64).max(1.0);
    if checksum(&scratch.out) != want_checksum {
        return Err(Error::Bench(format!(
            "{} kernel checksum {} != library checksum {want_checksum}",
            tag.name(),
            checksum(&scratch.out)
        )));
    }
    let inner = ((target_sample_ns / single_ns).round() as usize).clamp(1, 1_000_000);

    let tick = timer_tick_ns();
    let mut sink = 0.0f64;
    let mut samples = Vec::with_capacity(repeats);
    for i in 0..warmups + repeats {
        let start = Instant::now();
        for _ in 0..inner {
            run_kernel_into(tag, &setup, &mut scratch)?;
            // the sink keeps the optimizer from discarding the result and
            // doubles as the per-invocation integrity check
            let c = checksum(&scratch.out);
            if c != want_checksum {
                return Err(Error::Bench(format!(
                    "{} kernel checksum drifted during timing",
                    tag.name()
                )));
            }
            sink += c;
        }
        let sample_ns = start.elapsed().as_nanos() as f64;
        if i >= warmups {
            samples.push(sample_ns / inner as f64);
        }
    }
    std::hint::black_box(sink);

    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median(&sorted);
    if (med * inner as f64) < 100.0 * tick {
        return Err(Error::Bench(format!(
            "workload too small for the timer: sample {:.0} ns vs tick {:.0} ns; \
             increase channels or spatial size",
            med * inner as f64,
            tick
        )));
    }
    let mut devs: Vec<f64> = sorted.iter().map(|&x| (x - med).abs()).collect();
    devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mad = median(&devs);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<f64>()
        / samples.len() as f64;
    let cv = var.sqrt() / mean * 100.0;

    Ok(BenchRecord {
        tag,
        case: *case,
        repeats,
        warmups,
        median_ns: med,
        mad_ns: mad,
        cv_percent: cv,
        checksum: want_checksum,
        host: host_descriptor(),
    })
}

/// Run every kernel over every case; rows come back sorted by
/// (geometry, tag).
pub fn bench_suite(config: &SuiteConfig) -> Result<Vec<BenchRecord>> {
    let mut cases = config.cases.clone();
    cases.sort();
    let mut records = Vec::new();
    for case in &cases {
        for tag in KernelTag::all() {
            records.push(bench_kernel(
                tag,
                case,
                config.repeats,
                config.warmups,
                0xbe9c,
            )?);
        }
    }
    Ok(records)
}

/// Render records as the tab-separated table, preceded by host and column
/// comments.
pub fn records_tsv(records: &[BenchRecord]) -> String {
    let mut out = String::new();
    if let Some(first) = records.first() {
        out.push_str(&format!("# host: {}\n", first.host));
        out.push_str(&format!(
            "# repeats: {}, warmups: {}\n",
            first.repeats, first.warmups
        ));
    }
    out.push_str("tag\tk\tchannels\tspatial\tmedian_ns\tmad_ns\tcv_percent\n");
    for r in records {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}
