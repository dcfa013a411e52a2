//! A fixed battery of finite-difference gradient checks covering every
//! differentiable op and two small end-to-end networks. The `gradcheck`
//! CLI command prints it; the test suite asserts it.

use crate::net::{Family, Network, NetworkConfig};
use crate::ops::{
    batchnorm_train, bn_backward, conv2d_forward, conv2d_vjp, deconv2d_forward, deconv2d_vjp,
    finite_diff_check, linear_vjp, softmax_xent, ConvKernel, ConvSpec, GradCheckReport,
    RunningStats,
};
use crate::rng::SbRng;
use crate::sb::{sb_vjp, DownsampleMode, Inner, SamplingPattern};
use crate::tensor::{Shape4, Tensor4};

pub struct BatteryItem {
    pub name: &'static str,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl BatteryItem {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tol)
    }
}

const STEP: f64 = 1e-6;

fn rand(shape: Shape4, rng: &mut SbRng) -> Tensor4 {
    Tensor4::random_normal(shape, 0.0, 1.0, rng)
}

fn kernel(t: &Tensor4) -> ConvKernel {
    ConvKernel::new(t.clone()).expect("battery kernels are square")
}

fn conv_item(name: &'static str, spec: ConvSpec, x_shape: Shape4, co: usize, rng: &mut SbRng) -> BatteryItem {
    let x = rand(x_shape, rng);
    let kw = rand(Shape4::new(co, x_shape.c, spec.ksize, spec.ksize), rng);
    let (y, back) = conv2d_vjp(&x, &kernel(&kw), spec).expect("valid conv shapes");
    let w = rand(y.shape(), rng);
    let (dx, dk) = back.pull(&w);
    let mut f = |ins: &[Tensor4]| {
        conv2d_forward(&ins[0], &kernel(&ins[1]), spec)
            .expect("valid conv shapes")
            .dot(&w)
            .expect("cotangent shape")
    };
    let report = finite_diff_check(&mut f, &[x, kw], &[dx, dk], STEP, 120, rng);
    BatteryItem { name, tol: 1e-5, report }
}

fn deconv_item(name: &'static str, spec: ConvSpec, hw: (usize, usize), n: usize, ci: usize, co: usize, rng: &mut SbRng) -> BatteryItem {
    let (oh, ow) = crate::ops::out_hw(spec, hw.0, hw.1).expect("valid target");
    let y = rand(Shape4::new(n, co, oh, ow), rng);
    let kw = rand(Shape4::new(co, ci, spec.ksize, spec.ksize), rng);
    let (z, back) = deconv2d_vjp(&y, &kernel(&kw), spec, hw).expect("valid deconv shapes");
    let w = rand(z.shape(), rng);
    let (dy, dk) = back.pull(&w);
    let mut f = |ins: &[Tensor4]| {
        deconv2d_forward(&ins[0], &kernel(&ins[1]), spec, hw)
            .expect("valid deconv shapes")
            .dot(&w)
            .expect("cotangent shape")
    };
    let report = finite_diff_check(&mut f, &[y, kw], &[dy, dk], STEP, 120, rng);
    BatteryItem { name, tol: 1e-5, report }
}

fn bn_item(rng: &mut SbRng) -> BatteryItem {
    let x = rand(Shape4::new(3, 4, 5, 5), rng);
    let gamma = Tensor4::random_normal(Shape4::new(1, 4, 1, 1), 1.0, 0.2, rng);
    let beta = Tensor4::random_normal(Shape4::new(1, 4, 1, 1), 0.0, 0.2, rng);
    let mut stats = RunningStats::new(4);
    let (y, cache) = batchnorm_train(&x, &gamma, &beta, &mut stats).expect("valid bn shapes");
    let w = rand(y.shape(), rng);
    let (dx, dgamma, dbeta) = bn_backward(&cache, &w);
    let mut f = |ins: &[Tensor4]| {
        let mut s = RunningStats::new(4);
        batchnorm_train(&ins[0], &ins[1], &ins[2], &mut s)
            .expect("valid bn shapes")
            .0
            .dot(&w)
            .expect("cotangent shape")
    };
    let report = finite_diff_check(&mut f, &[x, gamma, beta], &[dx, dgamma, dbeta], STEP, 120, rng);
    BatteryItem { name: "batchnorm_train", tol: 1e-5, report }
}

fn sb_bnrelu_item(rng: &mut SbRng) -> BatteryItem {
    let c = 4;
    let pattern = SamplingPattern::named("2/4").expect("named pattern");
    let x = rand(Shape4::new(2, c, 6, 6), rng);
    let convw = rand(Shape4::new(c, c, 3, 3), rng);
    let deconvw = rand(Shape4::new(c, c, 3, 3), rng);
    let gamma = Tensor4::random_normal(Shape4::new(1, c, 1, 1), 1.0, 0.2, rng);
    let beta = Tensor4::random_normal(Shape4::new(1, c, 1, 1), 0.0, 0.2, rng);
    let run = |ins: &[Tensor4]| {
        // Stats are a side channel; train-mode output ignores them.
        let mut stats = RunningStats::new(c);
        sb_vjp(
            &ins[0],
            &kernel(&ins[1]),
            &kernel(&ins[2]),
            &pattern,
            DownsampleMode::StridedConv,
            Inner::BnRelu { gamma: &ins[3], beta: &ins[4] },
            Some(&mut stats),
        )
        .expect("valid module shapes")
    };
    let inputs = [x, convw, deconvw, gamma, beta];
    let (y, back) = run(&inputs);
    let w = rand(y.shape(), rng);
    let g = back.pull(&w);
    let analytic = [
        g.dx,
        g.d_conv,
        g.d_deconv,
        g.d_gamma.expect("inner bn present"),
        g.d_beta.expect("inner bn present"),
    ];
    let mut f = |ins: &[Tensor4]| run(ins).0.dot(&w).expect("cotangent shape");
    let report = finite_diff_check(&mut f, &inputs, &analytic, STEP, 150, rng);
    BatteryItem { name: "sb_module 2/4 bn-relu", tol: 1e-5, report }
}

fn sb_pool_item(rng: &mut SbRng) -> BatteryItem {
    let (c, mid) = (4, 2);
    let pattern = SamplingPattern::named("3/4").expect("named pattern");
    let x = rand(Shape4::new(1, c, 5, 7), rng);
    let convw = rand(Shape4::new(mid, c, 3, 3), rng);
    let deconvw = rand(Shape4::new(mid, c, 3, 3), rng);
    let run = |ins: &[Tensor4]| {
        sb_vjp(
            &ins[0],
            &kernel(&ins[1]),
            &kernel(&ins[2]),
            &pattern,
            DownsampleMode::AvgpoolConv,
            Inner::None,
            None,
        )
        .expect("valid module shapes")
    };
    let inputs = [x, convw, deconvw];
    let (y, back) = run(&inputs);
    let w = rand(y.shape(), rng);
    let g = back.pull(&w);
    let analytic = [g.dx, g.d_conv, g.d_deconv];
    let mut f = |ins: &[Tensor4]| run(ins).0.dot(&w).expect("cotangent shape");
    let report = finite_diff_check(&mut f, &inputs, &analytic, STEP, 150, rng);
    BatteryItem { name: "sb_module 3/4 avgpool odd-map", tol: 1e-5, report }
}

fn linear_item(rng: &mut SbRng) -> BatteryItem {
    let x = rand(Shape4::new(3, 6, 1, 1), rng);
    let wmat = rand(Shape4::new(5, 6, 1, 1), rng);
    let (y, back) = linear_vjp(&x, &wmat).expect("valid linear shapes");
    let w = rand(y.shape(), rng);
    let (dx, dw) = back(&w);
    let mut f = |ins: &[Tensor4]| {
        crate::ops::linear(&ins[0], &ins[1]).expect("valid linear shapes").dot(&w).expect("cotangent shape")
    };
    let report = finite_diff_check(&mut f, &[x, wmat], &[dx, dw], STEP, 60, rng);
    BatteryItem { name: "linear", tol: 1e-5, report }
}

fn softmax_item(rng: &mut SbRng) -> BatteryItem {
    let logits = rand(Shape4::new(4, 6, 1, 1), rng);
    let labels = [0usize, 3, 5, 2];
    let (_, dlogits) = softmax_xent(&logits, &labels).expect("labels in range");
    let mut f = |ins: &[Tensor4]| softmax_xent(&ins[0], &labels).expect("labels in range").0;
    let report = finite_diff_check(&mut f, &[logits], &[dlogits], STEP, 24, rng);
    BatteryItem { name: "softmax_xent", tol: 1e-5, report }
}

fn network_item(name: &'static str, config: NetworkConfig, hw: usize, picks: &[&str], rng: &mut SbRng) -> BatteryItem {
    let mut net = Network::build(&config, 11).expect("valid config");
    let x = rand(Shape4::new(2, 3, hw, hw), rng);
    let labels: Vec<usize> = (0..2).map(|i| i % config.num_classes).collect();

    let indices: Vec<usize> = picks
        .iter()
        .map(|want| {
            net.params()
                .iter()
                .position(|p| p.name == *want)
                .unwrap_or_else(|| panic!("param {want} exists"))
        })
        .collect();
    let inputs: Vec<Tensor4> = indices.iter().map(|&i| net.params()[i].value.clone()).collect();

    net.zero_grads();
    let (logits, cache) = net.forward_train(&x).expect("forward shapes");
    let (_, dlogits) = softmax_xent(&logits, &labels).expect("labels in range");
    net.backward(&cache, &dlogits);
    let analytic: Vec<Tensor4> = indices.iter().map(|&i| net.params()[i].grad.clone()).collect();

    let mut f = |ins: &[Tensor4]| {
        for (j, &i) in indices.iter().enumerate() {
            net.params_mut()[i].value = ins[j].clone();
        }
        let (logits, _) = net.forward_train(&x).expect("forward shapes");
        softmax_xent(&logits, &labels).expect("labels in range").0
    };
    let report = finite_diff_check(&mut f, &inputs, &analytic, 1e-5, 60, rng);
    BatteryItem { name, tol: 1e-4, report }
}

/// Build and run every check. Deterministic for a given seed.
pub fn standard_battery(seed: u64) -> Vec<BatteryItem> {
    let mut rng = SbRng::new(seed);
    let mut items = vec![
        conv_item(
            "conv2d dense 3x3",
            ConvSpec::dense(3),
            Shape4::new(2, 3, 6, 7),
            4,
            &mut rng,
        ),
        conv_item(
            "conv2d stride2 offset(1,0)",
            ConvSpec::new(2, (1, 0), 3).expect("valid spec"),
            Shape4::new(1, 2, 7, 6),
            3,
            &mut rng,
        ),
        conv_item(
            "conv2d 1x1 stride2 offset(0,1)",
            ConvSpec::new(2, (0, 1), 1).expect("valid spec"),
            Shape4::new(2, 3, 5, 6),
            2,
            &mut rng,
        ),
        deconv_item(
            "deconv2d stride2 offset(1,1)",
            ConvSpec::new(2, (1, 1), 3).expect("valid spec"),
            (6, 6),
            2,
            2,
            3,
            &mut rng,
        ),
        deconv_item("deconv2d dense 3x3", ConvSpec::dense(3), (5, 4), 1, 3, 2, &mut rng),
        bn_item(&mut rng),
        sb_bnrelu_item(&mut rng),
        sb_pool_item(&mut rng),
        linear_item(&mut rng),
        softmax_item(&mut rng),
    ];
    items.push(network_item(
        "network cifar_regular-8 sb 2/4",
        NetworkConfig::new(Family::CifarRegular, 8, 4).with_sb("2/4", DownsampleMode::StridedConv),
        16,
        &[
            "stem.w",
            "block00.sb.conv.w",
            "block00.sb.deconv.w",
            "block00.sb.bn.gamma",
            "block01.conv1.w",
            "final_bn.beta",
            "fc.w",
        ],
        &mut rng,
    ));
    items.push(network_item(
        "network cifar_bottleneck-11",
        NetworkConfig::new(Family::CifarBottleneck, 11, 3),
        12,
        &["block00.conv1.w", "block00.conv2.w", "block00.conv3.w", "block01.bn2.gamma", "fc.w"],
        &mut rng,
    ));
    items
}
