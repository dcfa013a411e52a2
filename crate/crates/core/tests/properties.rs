//! Randomized invariants of the strided conv/deconv pair and the module
//! built from them, plus serialization round-trips.

use proptest::prelude::*;

use sbnet_core::net::{Family, NetworkConfig};
use sbnet_core::ops::{conv2d_forward, deconv2d_forward, ConvKernel, ConvSpec};
use sbnet_core::rng::SbRng;
use sbnet_core::sb::{sb_forward_eval, DownsampleMode, Inner, SamplingPattern};
use sbnet_core::tensor::{Shape4, Tensor4};

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn tensor(shape: Shape4, seed: u64) -> Tensor4 {
    Tensor4::random_normal(shape, 0.0, 1.0, &mut SbRng::new(seed))
}

fn kernel(co: usize, ci: usize, ksize: usize, seed: u64) -> ConvKernel {
    ConvKernel::new(tensor(Shape4::new(co, ci, ksize, ksize), seed)).expect("square kernel")
}

/// Distinct offsets below `stride`, drawn by shuffling the full residue
/// grid and keeping a prefix.
fn random_pattern(stride: usize, m: usize, seed: u64) -> SamplingPattern {
    let mut grid: Vec<(usize, usize)> = (0..stride)
        .flat_map(|a| (0..stride).map(move |b| (a, b)))
        .collect();
    SbRng::new(seed).shuffle(&mut grid);
    grid.truncate(m);
    SamplingPattern::custom(stride, grid).expect("distinct offsets below stride")
}

prop_compose! {
    fn conv_instance()(
        ci in 1usize..=3,
        co in 1usize..=3,
        h in 3usize..=8,
        w in 3usize..=8,
        stride in 2usize..=3,
        ksize in prop::sample::select(vec![1usize, 3]),
        raw_off in any::<u32>(),
        seed in any::<u64>(),
    ) -> (Shape4, usize, usize, ConvSpec, u64) {
        let a = raw_off as usize % stride;
        let b = (raw_off >> 8) as usize % stride;
        let spec = ConvSpec::new(stride, (a, b), ksize).expect("offset below stride");
        (Shape4::new(1, ci, h, w), co, ksize, spec, seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    /// The strided-offset convolution returns exactly the rows of the
    /// dense convolution on its residue class, bit for bit.
    #[test]
    fn strided_conv_equals_subsampled_dense((in_shape, co, ksize, spec, seed) in conv_instance()) {
        let x = tensor(in_shape, seed);
        let k = kernel(co, in_shape.c, ksize, seed ^ 0x9e3779b97f4a7c15);
        let dense = conv2d_forward(&x, &k, ConvSpec::dense(ksize)).unwrap();
        let strided = conv2d_forward(&x, &k, spec).unwrap();
        let s = strided.shape();
        let (a, b) = spec.offset;
        prop_assert_eq!(s.h, (in_shape.h - a).div_ceil(spec.stride));
        prop_assert_eq!(s.w, (in_shape.w - b).div_ceil(spec.stride));
        for c in 0..co {
            for oy in 0..s.h {
                for ox in 0..s.w {
                    let want = dense.at(0, c, a + spec.stride * oy, b + spec.stride * ox);
                    let got = strided.at(0, c, oy, ox);
                    prop_assert!(
                        got.to_bits() == want.to_bits(),
                        "({c}, {oy}, {ox}): {got} vs {want}, offset ({a}, {b}) stride {}",
                        spec.stride
                    );
                }
            }
        }
    }

    /// <u, conv(x)> == <deconv(u), x> for every shape and offset: the two
    /// ops realize a linear map and its adjoint.
    #[test]
    fn deconv_is_the_conv_adjoint((in_shape, co, ksize, spec, seed) in conv_instance()) {
        let x = tensor(in_shape, seed);
        let k = kernel(co, in_shape.c, ksize, seed ^ 0x6a09e667f3bcc908);
        let y = conv2d_forward(&x, &k, spec).unwrap();
        let u = tensor(y.shape(), seed ^ 0xbb67ae8584caa73b);
        let lhs = u.dot(&y).unwrap();
        let back = deconv2d_forward(&u, &k, spec, (in_shape.h, in_shape.w)).unwrap();
        let rhs = back.dot(&x).unwrap();
        prop_assert!(rel_close(lhs, rhs, 1e-12), "{lhs} vs {rhs}");
    }

    /// Compact map dimensions follow ceil((len - offset) / stride) on both
    /// axes, including offsets that leave a single valid position.
    #[test]
    fn compact_shape_law((in_shape, co, ksize, spec, seed) in conv_instance()) {
        let x = tensor(in_shape, seed);
        let k = kernel(co, in_shape.c, ksize, seed ^ 0x3c6ef372fe94f82b);
        let y = conv2d_forward(&x, &k, spec).unwrap();
        let (a, b) = spec.offset;
        let want = Shape4::new(
            1,
            co,
            (in_shape.h - a).div_ceil(spec.stride),
            (in_shape.w - b).div_ceil(spec.stride),
        );
        prop_assert_eq!(y.shape(), want);
    }
}

prop_compose! {
    fn module_instance()(
        c_in in 1usize..=3,
        c_mid in 1usize..=3,
        c_out in 1usize..=3,
        h in 4usize..=8,
        w in 4usize..=8,
        stride in 2usize..=3,
        raw_m in any::<u32>(),
        avgpool in any::<bool>(),
        seed in any::<u64>(),
    ) -> (Shape4, usize, usize, SamplingPattern, DownsampleMode, u64) {
        let m = 1 + raw_m as usize % (stride * stride);
        let pattern = random_pattern(stride, m, seed ^ 0xa54ff53a5f1d36f1);
        let mode = if avgpool { DownsampleMode::AvgpoolConv } else { DownsampleMode::StridedConv };
        (Shape4::new(1, c_in, h, w), c_mid, c_out, pattern, mode, seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    /// With no inner nonlinearity the module is linear: it satisfies
    /// superposition to near machine precision.
    #[test]
    fn module_without_inner_nonlinearity_superposes(
        (in_shape, c_mid, c_out, pattern, mode, seed) in module_instance(),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let conv = kernel(c_mid, in_shape.c, 3, seed ^ 0x510e527fade682d1);
        let deconv = kernel(c_mid, c_out, 3, seed ^ 0x1f83d9abfb41bd6b);
        let f = |input: &Tensor4| {
            sb_forward_eval(input, &conv, &deconv, &pattern, mode, Inner::None, None).unwrap()
        };
        let x = tensor(in_shape, seed);
        let z = tensor(in_shape, seed ^ 0x5be0cd19137e2179);
        let mut combo = x.clone();
        combo.scale(alpha);
        combo.add_scaled(&z, beta).unwrap();
        let lhs = f(&combo);
        let mut rhs = f(&x);
        rhs.scale(alpha);
        rhs.add_scaled(&f(&z), beta).unwrap();
        let scale = lhs.abs_max().max(rhs.abs_max()).max(1.0);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() <= 1e-12 * scale, "{l} vs {r}");
        }
    }

    /// The multi-subset output is exactly the left-to-right sum of the
    /// single-subset outputs: adding a subset never perturbs the others.
    #[test]
    fn subset_contributions_accumulate_in_listed_order(
        (in_shape, c_mid, c_out, pattern, mode, seed) in module_instance(),
    ) {
        let conv = kernel(c_mid, in_shape.c, 3, seed ^ 0x428a2f98d728ae22);
        let deconv = kernel(c_mid, c_out, 3, seed ^ 0x7137449123ef65cd);
        let whole =
            sb_forward_eval(&tensor(in_shape, seed), &conv, &deconv, &pattern, mode, Inner::None, None).unwrap();
        let x = tensor(in_shape, seed);
        let mut acc = Tensor4::zeros(whole.shape());
        for &(a, b) in pattern.offsets() {
            let single = SamplingPattern::custom(pattern.stride(), vec![(a, b)]).unwrap();
            let part = sb_forward_eval(&x, &conv, &deconv, &single, mode, Inner::None, None).unwrap();
            acc.add_scaled(&part, 1.0).unwrap();
        }
        prop_assert!(acc.bit_eq(&whole), "prefix sum diverged from the fused pass");
    }
}

fn arb_shape() -> impl Strategy<Value = Shape4> {
    (1usize..=3, 1usize..=3, 1usize..=5, 1usize..=5).prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// The tensor container stores raw little-endian bits: every payload,
    /// NaNs and signed zeros included, survives a file round trip.
    #[test]
    fn tensor_file_round_trip(
        (shape, bits) in arb_shape().prop_flat_map(|s| {
            let n = s.elems();
            (Just(s), proptest::collection::vec(any::<u64>(), n))
        }),
    ) {
        let data: Vec<f64> = bits.into_iter().map(f64::from_bits).collect();
        let t = Tensor4::from_vec(shape, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sbt");
        t.save(&path).unwrap();
        let back = Tensor4::load(&path).unwrap();
        prop_assert_eq!(back.shape(), shape);
        prop_assert!(back.bit_eq(&t));
    }

    /// Every valid config survives JSON serialization unchanged.
    #[test]
    fn config_json_round_trip(
        pick in prop_oneof![
            (1usize..=18).prop_map(|n| (Family::CifarRegular, 6 * n + 2)),
            (1usize..=11).prop_map(|n| (Family::CifarBottleneck, 9 * n + 2)),
            prop::sample::select(vec![18usize, 34]).prop_map(|d| (Family::ImagenetRegular, d)),
            prop::sample::select(vec![50usize, 101]).prop_map(|d| (Family::ImagenetBottleneck, d)),
        ],
        classes in 2usize..=1000,
        sb in any::<bool>(),
        pattern in prop::sample::select(vec!["1/4", "2/4", "3/4", "full"]),
        avgpool in any::<bool>(),
    ) {
        let (family, depth) = pick;
        let mut cfg = NetworkConfig::new(family, depth, classes);
        if sb {
            let mode = if avgpool { DownsampleMode::AvgpoolConv } else { DownsampleMode::StridedConv };
            cfg = cfg.with_sb(pattern, mode);
        }
        let back = NetworkConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
