//! Wall-clock benchmark of inference through one residual block: a plain
//! two-conv block against the compact conv/deconv module at 1/4, 2/4, and
//! 3/4 sampling density. Single-threaded by construction; timings are
//! median and interquartile range over repeated forwards on one input.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::ops::{batchnorm_eval, conv2d_forward, relu, ConvKernel, ConvSpec, OpError, RunningStats};
use crate::rng::SbRng;
use crate::sb::{sb_forward_eval, DownsampleMode, Inner, SamplingPattern};
use crate::tensor::{Shape4, Tensor4};

pub const WARMUP_ITERS: usize = 10;

/// Measured speedup below this fails the wall-clock check.
pub const SPEEDUP_FAIL_BELOW: f64 = 1.15;
/// At or above this the check passes cleanly; between the two it passes
/// with a warning (MAC savings only partially realized).
pub const SPEEDUP_PASS_AT: f64 = 1.3;

pub fn speedup_verdict(speedup: f64) -> &'static str {
    if speedup < SPEEDUP_FAIL_BELOW {
        "fail"
    } else if speedup < SPEEDUP_PASS_AT {
        "warn-pass"
    } else {
        "pass"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchCase {
    /// Dense two-conv residual block, the baseline.
    Rb,
    /// Conv/deconv module sampling `m` of the 4 offsets at stride 2.
    Sb { m: usize },
}

impl BenchCase {
    pub fn parse(s: &str) -> Option<BenchCase> {
        match s {
            "rb" => Some(BenchCase::Rb),
            "sb_1/4" => Some(BenchCase::Sb { m: 1 }),
            "sb_2/4" => Some(BenchCase::Sb { m: 2 }),
            "sb_3/4" => Some(BenchCase::Sb { m: 3 }),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            BenchCase::Rb => "rb".into(),
            BenchCase::Sb { m } => format!("sb_{m}/4"),
        }
    }

    pub fn all() -> [BenchCase; 4] {
        [BenchCase::Rb, BenchCase::Sb { m: 1 }, BenchCase::Sb { m: 2 }, BenchCase::Sb { m: 3 }]
    }

    fn pattern(&self) -> Option<SamplingPattern> {
        match self {
            BenchCase::Rb => None,
            BenchCase::Sb { m } => {
                Some(SamplingPattern::named(&format!("{m}/4")).expect("known density"))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub case: String,
    pub median_ms: f64,
    pub iqr_ms: f64,
    /// Analytic multiply-accumulates of one forward at this batch size.
    pub macs: u64,
    pub speedup_vs_baseline: f64,
    pub threads: usize,
}

/// Type-7 quantile of an already sorted sample.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}

fn time_ms(mut f: impl FnMut() -> Tensor4, iters: usize, warmup: usize) -> (f64, f64) {
    for _ in 0..warmup {
        black_box(&f());
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = f();
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        black_box(&out);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    (quantile(&samples, 0.5), quantile(&samples, 0.75) - quantile(&samples, 0.25))
}

fn conv_positions(hw: usize, pattern: &SamplingPattern) -> u64 {
    let k = pattern.stride();
    pattern
        .offsets()
        .iter()
        .map(|&(a, b)| ((hw - a).div_ceil(k) * (hw - b).div_ceil(k)) as u64)
        .sum()
}

/// MACs of one forward through the benchmarked block.
pub fn case_macs(case: BenchCase, channels: usize, hw: usize, batch: usize) -> u64 {
    let per_conv_pos = (channels * channels * 9) as u64;
    let positions = match case.pattern() {
        None => (hw * hw) as u64,
        Some(p) => conv_positions(hw, &p),
    };
    2 * positions * per_conv_pos * batch as u64
}

struct BlockParts {
    gamma1: Tensor4,
    beta1: Tensor4,
    stats1: RunningStats,
    k1: ConvKernel,
    gamma2: Tensor4,
    beta2: Tensor4,
    stats2: RunningStats,
    k2: ConvKernel,
}

fn build_parts(channels: usize, rng: &mut SbRng) -> BlockParts {
    let c = channels;
    let sd = (2.0 / (c * 9) as f64).sqrt();
    let kshape = Shape4::new(c, c, 3, 3);
    let vec1 = Shape4::new(1, c, 1, 1);
    BlockParts {
        gamma1: Tensor4::filled(vec1, 1.0),
        beta1: Tensor4::zeros(vec1),
        stats1: RunningStats::new(c),
        k1: ConvKernel::new(Tensor4::random_normal(kshape, 0.0, sd, rng)).expect("square kernel"),
        gamma2: Tensor4::filled(vec1, 1.0),
        beta2: Tensor4::zeros(vec1),
        stats2: RunningStats::new(c),
        k2: ConvKernel::new(Tensor4::random_normal(kshape, 0.0, sd, rng)).expect("square kernel"),
    }
}

fn forward_case(case: BenchCase, parts: &BlockParts, x: &Tensor4) -> Result<Tensor4, OpError> {
    let h1 = relu(&batchnorm_eval(x, &parts.gamma1, &parts.beta1, &parts.stats1)?);
    let mut out = match case.pattern() {
        None => {
            let mid = conv2d_forward(&h1, &parts.k1, ConvSpec::dense(3))?;
            let h2 = relu(&batchnorm_eval(&mid, &parts.gamma2, &parts.beta2, &parts.stats2)?);
            conv2d_forward(&h2, &parts.k2, ConvSpec::dense(3))?
        }
        Some(pattern) => sb_forward_eval(
            &h1,
            &parts.k1,
            &parts.k2,
            &pattern,
            DownsampleMode::StridedConv,
            Inner::BnRelu { gamma: &parts.gamma2, beta: &parts.beta2 },
            Some(&parts.stats2),
        )?,
    };
    out.add_scaled(x, 1.0)?;
    Ok(out)
}

/// Benchmark the requested cases on one shared random input. The dense
/// baseline is always measured so each result carries a speedup.
pub fn run_suite(
    cases: &[BenchCase],
    channels: usize,
    hw: usize,
    batch: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<BenchResult>, OpError> {
    assert!(iters >= 1);
    let mut rng = SbRng::new(seed);
    let parts = build_parts(channels, &mut rng);
    let x = Tensor4::random_normal(Shape4::new(batch, channels, hw, hw), 0.0, 1.0, &mut rng);

    // Fail fast on shape errors before the timed region.
    forward_case(BenchCase::Rb, &parts, &x)?;

    let (base_median, base_iqr) = time_ms(|| forward_case(BenchCase::Rb, &parts, &x).expect("checked above"), iters, WARMUP_ITERS);

    let mut results = Vec::with_capacity(cases.len());
    for &case in cases {
        let (median_ms, iqr_ms) = if case == BenchCase::Rb {
            (base_median, base_iqr)
        } else {
            forward_case(case, &parts, &x)?;
            time_ms(|| forward_case(case, &parts, &x).expect("checked above"), iters, WARMUP_ITERS)
        };
        results.push(BenchResult {
            case: case.label(),
            median_ms,
            iqr_ms,
            macs: case_macs(case, channels, hw, batch),
            speedup_vs_baseline: base_median / median_ms,
            threads: 1,
        });
    }
    Ok(results)
}
