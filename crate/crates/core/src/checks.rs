//! Randomized invariant checks over the conv/deconv module, shared by the
//! property test suite and the `properties` CLI command. Each check draws
//! its own sizes and data from the supplied generator and returns a
//! description of the first violation, if any.

use crate::ops::{conv2d_forward, deconv2d_forward, out_hw, ConvKernel, ConvSpec};
use crate::rng::SbRng;
use crate::sb::{sb_forward_eval, DownsampleMode, Inner, SamplingPattern};
use crate::tensor::{Shape4, Tensor4};

fn rand_tensor(shape: Shape4, rng: &mut SbRng) -> Tensor4 {
    Tensor4::random_normal(shape, 0.0, 1.0, rng)
}

fn rand_kernel(co: usize, ci: usize, ksize: usize, rng: &mut SbRng) -> ConvKernel {
    ConvKernel::new(rand_tensor(Shape4::new(co, ci, ksize, ksize), rng)).expect("square kernel")
}

/// Compact output dims obey oh = ceil((h - a) / stride) on both axes.
pub fn check_shape_law(rng: &mut SbRng) -> Result<(), String> {
    let stride = 1 + rng.index(3);
    let offset = (rng.index(stride), rng.index(stride));
    let h = offset.0 + 1 + rng.index(12);
    let w = offset.1 + 1 + rng.index(12);
    let spec = ConvSpec::new(stride, offset, 3).map_err(|e| e.to_string())?;
    let got = out_hw(spec, h, w).map_err(|e| e.to_string())?;
    let want = ((h - offset.0).div_ceil(stride), (w - offset.1).div_ceil(stride));
    if got != want {
        return Err(format!(
            "shape law: spec stride {stride} offset {offset:?} on {h}x{w} gave {got:?}, expected {want:?}"
        ));
    }
    Ok(())
}

/// An offset-strided conv equals the dense stride-1 conv subsampled at
/// that offset, bit for bit.
pub fn check_subset_equivalence(rng: &mut SbRng) -> Result<(), String> {
    let (n, ci, co) = (1 + rng.index(2), 1 + rng.index(4), 1 + rng.index(4));
    let stride = 2 + rng.index(2);
    let offset = (rng.index(stride), rng.index(stride));
    let h = (offset.0 + 1).max(4) + rng.index(6);
    let w = (offset.1 + 1).max(4) + rng.index(6);
    let ksize = if rng.bernoulli(0.5) { 1 } else { 3 };
    let x = rand_tensor(Shape4::new(n, ci, h, w), rng);
    let k = rand_kernel(co, ci, ksize, rng);
    let spec = ConvSpec::new(stride, offset, ksize).map_err(|e| e.to_string())?;

    let compact = conv2d_forward(&x, &k, spec).map_err(|e| e.to_string())?;
    let dense = conv2d_forward(&x, &k, ConvSpec::dense(ksize)).map_err(|e| e.to_string())?;

    let cs = compact.shape();
    let mut picked = Tensor4::zeros(cs);
    {
        let buf = picked.data_mut();
        let mut i = 0;
        for img in 0..cs.n {
            for c in 0..cs.c {
                for p in 0..cs.h {
                    for q in 0..cs.w {
                        buf[i] = dense.at(img, c, offset.0 + stride * p, offset.1 + stride * q);
                        i += 1;
                    }
                }
            }
        }
    }
    if !compact.bit_eq(&picked) {
        return Err(format!(
            "subset equivalence: stride {stride} offset {offset:?} k {ksize} on {n}x{ci}x{h}x{w} differs from subsampled dense conv"
        ));
    }
    Ok(())
}

/// <conv(x), y> = <x, deconv(y)> for every kernel and spec.
pub fn check_adjoint_identity(rng: &mut SbRng) -> Result<(), String> {
    let (n, ci, co) = (1 + rng.index(2), 1 + rng.index(4), 1 + rng.index(4));
    let stride = 1 + rng.index(3);
    let offset = (rng.index(stride), rng.index(stride));
    let h = (offset.0 + 1).max(4) + rng.index(6);
    let w = (offset.1 + 1).max(4) + rng.index(6);
    let ksize = if rng.bernoulli(0.5) { 1 } else { 3 };
    let x = rand_tensor(Shape4::new(n, ci, h, w), rng);
    let k = rand_kernel(co, ci, ksize, rng);
    let spec = ConvSpec::new(stride, offset, ksize).map_err(|e| e.to_string())?;

    let cx = conv2d_forward(&x, &k, spec).map_err(|e| e.to_string())?;
    let y = rand_tensor(cx.shape(), rng);
    let dy = deconv2d_forward(&y, &k, spec, (h, w)).map_err(|e| e.to_string())?;
    let lhs = cx.dot(&y).map_err(|e| e.to_string())?;
    let rhs = x.dot(&dy).map_err(|e| e.to_string())?;
    let scale = lhs.abs().max(rhs.abs()).max(1.0);
    if (lhs - rhs).abs() / scale > 1e-12 {
        return Err(format!(
            "adjoint identity: <conv x, y> = {lhs} but <x, deconv y> = {rhs} (stride {stride} offset {offset:?} k {ksize})"
        ));
    }
    Ok(())
}

/// With no inner nonlinearity the module is linear in its input.
pub fn check_linearity(rng: &mut SbRng) -> Result<(), String> {
    let c = 1 + rng.index(4);
    let mid = 1 + rng.index(4);
    let hw = 4 + rng.index(5);
    let stride = 2 + rng.index(2);
    let count = 1 + rng.index(stride * stride);
    let pattern = random_pattern(stride, count, rng);
    let conv = rand_kernel(mid, c, 3, rng);
    let deconv = rand_kernel(mid, c, 3, rng);
    let x = rand_tensor(Shape4::new(1, c, hw, hw), rng);
    let y = rand_tensor(Shape4::new(1, c, hw, hw), rng);
    let (a, b) = (rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));

    let run = |t: &Tensor4| {
        sb_forward_eval(t, &conv, &deconv, &pattern, DownsampleMode::StridedConv, Inner::None, None)
    };
    let mut mixed = x.clone();
    mixed.scale(a);
    mixed.add_scaled(&y, b).map_err(|e| e.to_string())?;
    let lhs = run(&mixed).map_err(|e| e.to_string())?;
    let mut rhs = run(&x).map_err(|e| e.to_string())?;
    rhs.scale(a);
    rhs.add_scaled(&run(&y).map_err(|e| e.to_string())?, b).map_err(|e| e.to_string())?;

    let mut diff = lhs.clone();
    diff.add_scaled(&rhs, -1.0).map_err(|e| e.to_string())?;
    let scale = lhs.abs_max().max(rhs.abs_max()).max(1.0);
    if diff.abs_max() / scale > 1e-12 {
        return Err(format!(
            "linearity: pattern {} stride {stride} deviates by {} at scale {scale}",
            pattern.label(),
            diff.abs_max()
        ));
    }
    Ok(())
}

/// Running the module with a list of offsets equals summing the runs of
/// each offset alone, in order - the additions happen in the same order,
/// so the totals are bit-identical.
pub fn check_monotone_decomposition(rng: &mut SbRng) -> Result<(), String> {
    let c = 1 + rng.index(3);
    let mid = 1 + rng.index(3);
    let hw = 4 + rng.index(5);
    let stride = 2 + rng.index(2);
    let count = 1 + rng.index(stride * stride);
    let pattern = random_pattern(stride, count, rng);
    let conv = rand_kernel(mid, c, 3, rng);
    let deconv = rand_kernel(mid, c, 3, rng);
    let x = rand_tensor(Shape4::new(1, c, hw, hw), rng);

    let whole = sb_forward_eval(&x, &conv, &deconv, &pattern, DownsampleMode::StridedConv, Inner::None, None)
        .map_err(|e| e.to_string())?;
    let mut sum = Tensor4::zeros(whole.shape());
    for &off in pattern.offsets() {
        let single = SamplingPattern::custom(stride, vec![off]).map_err(|e| e.to_string())?;
        let part = sb_forward_eval(&x, &conv, &deconv, &single, DownsampleMode::StridedConv, Inner::None, None)
            .map_err(|e| e.to_string())?;
        sum.add_scaled(&part, 1.0).map_err(|e| e.to_string())?;
    }
    if !whole.bit_eq(&sum) {
        return Err(format!(
            "monotone decomposition: pattern {} stride {stride} is not the bitwise sum of its subsets",
            pattern.label()
        ));
    }
    Ok(())
}

/// Tensor file round-trip is bit-exact.
pub fn check_tensor_roundtrip(rng: &mut SbRng) -> Result<(), String> {
    let shape = Shape4::new(1 + rng.index(2), 1 + rng.index(3), 1 + rng.index(4), 1 + rng.index(5));
    let t = rand_tensor(shape, rng);
    let path = std::env::temp_dir().join(format!(
        "sbnet-check-{}-{}.sbt",
        std::process::id(),
        rng.next_u64()
    ));
    let result = (|| {
        t.save(&path).map_err(|e| e.to_string())?;
        let back = Tensor4::load(&path).map_err(|e| e.to_string())?;
        if !back.bit_eq(&t) {
            return Err(format!("roundtrip: {shape} tensor changed across save/load"));
        }
        Ok(())
    })();
    let _ = std::fs::remove_file(&path);
    result
}

fn random_pattern(stride: usize, count: usize, rng: &mut SbRng) -> SamplingPattern {
    let mut all: Vec<(usize, usize)> = (0..stride)
        .flat_map(|a| (0..stride).map(move |b| (a, b)))
        .collect();
    rng.shuffle(&mut all);
    all.truncate(count);
    SamplingPattern::custom(stride, all).expect("subset of the full grid")
}

pub struct BatteryOutcome {
    pub cases_run: usize,
    pub failures: Vec<String>,
}

impl BatteryOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Cycle the checks for `cases` draws total.
pub fn run_random_battery(cases: usize, seed: u64) -> BatteryOutcome {
    let mut rng = SbRng::new(seed);
    let checks: [(&str, fn(&mut SbRng) -> Result<(), String>); 6] = [
        ("shape_law", check_shape_law),
        ("subset_equivalence", check_subset_equivalence),
        ("adjoint_identity", check_adjoint_identity),
        ("linearity", check_linearity),
        ("monotone_decomposition", check_monotone_decomposition),
        ("tensor_roundtrip", check_tensor_roundtrip),
    ];
    let mut failures = Vec::new();
    for i in 0..cases {
        let (name, check) = checks[i % checks.len()];
        if let Err(msg) = check(&mut rng) {
            failures.push(format!("case {i} [{name}]: {msg}"));
        }
    }
    BatteryOutcome { cases_run: cases, failures }
}
