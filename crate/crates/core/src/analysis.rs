//! Analytic cost model: multiply-accumulates, parameters, and auxiliary
//! elementwise work per layer, plus receptive-field probing.
//!
//! Conventions, fixed across the crate:
//! * one MAC = one multiply plus one add; only conv, deconv, projection,
//!   and the fully connected map count MACs;
//! * convolutions are costed as positions x in_ch x out_ch x k^2, padding
//!   taps included, which is exactly what the counting reference ops do;
//! * a deconvolution costs the same as the convolution it transposes;
//! * batch norm, ReLU, pooling, and residual adds are tallied separately
//!   in `aux_ops` (elementwise operation applications, batch 1): a BN+ReLU
//!   step is 2 per element, a pool is one per window cell, an add is one
//!   per element;
//! * everything is reported at batch size 1 and the family's native input
//!   resolution.

use serde::Serialize;

use crate::net::{plan, Family, NetError, NetworkConfig};
use crate::ops::{conv2d_forward, deconv2d_forward, ConvKernel, ConvSpec, OpError};
use crate::sb::{DownsampleMode, SamplingPattern};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Debug, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub out: Shape4,
    pub macs: u64,
    pub params: u64,
    pub aux_ops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub config: NetworkConfig,
    pub rows: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_params: u64,
    pub total_aux_ops: u64,
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let label = if self.config.sb.enabled {
            format!("{} depth {} sb {}", self.config.family, self.config.depth, self.config.sb.pattern)
        } else {
            format!("{} depth {}", self.config.family, self.config.depth)
        };
        s.push_str(&format!("{label}\n"));
        s.push_str(&format!("{:<22} {:>14} {:>14} {:>12} {:>12}\n", "layer", "output", "macs", "params", "aux_ops"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<22} {:>14} {:>14} {:>12} {:>12}\n",
                r.name,
                r.out.to_string(),
                r.macs,
                r.params,
                r.aux_ops
            ));
        }
        s.push_str(&format!(
            "{:<22} {:>14} {:>14} {:>12} {:>12}\n",
            "TOTAL", "", self.total_macs, self.total_params, self.total_aux_ops
        ));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,out_n,out_c,out_h,out_w,macs,params,aux_ops\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.name, r.out.n, r.out.c, r.out.h, r.out.w, r.macs, r.params, r.aux_ops
            ));
        }
        s.push_str(&format!("TOTAL,,,,,{},{},{}\n", self.total_macs, self.total_params, self.total_aux_ops));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn positions(hw: usize, stride: usize, offset: (usize, usize)) -> u64 {
    let oh = (hw - offset.0).div_ceil(stride) as u64;
    let ow = (hw - offset.1).div_ceil(stride) as u64;
    oh * ow
}

struct Acc {
    rows: Vec<LayerCost>,
}

impl Acc {
    fn mac(&mut self, name: String, out: Shape4, macs: u64, params: u64) {
        self.rows.push(LayerCost { name, out, macs, params, aux_ops: 0 });
    }

    fn aux(&mut self, name: String, out: Shape4, aux_ops: u64) {
        self.rows.push(LayerCost { name, out, macs: 0, params: 0, aux_ops });
    }

    fn bn_relu(&mut self, name: String, c: usize, hw: usize) {
        let out = Shape4::new(1, c, hw, hw);
        // Scale and shift are learnable; running stats are not parameters.
        self.rows.push(LayerCost {
            name,
            out,
            macs: 0,
            params: 2 * c as u64,
            aux_ops: 2 * out.elems() as u64,
        });
    }
}

/// Cost every layer of the configured network.
pub fn analyze(config: &NetworkConfig) -> Result<CostReport, NetError> {
    let p = plan(config)?;
    let pattern = if config.sb.enabled { Some(config.pattern()?) } else { None };
    let mut acc = Acc { rows: Vec::new() };

    let hw1 = p.input_hw.div_ceil(p.stem_stride);
    let stem_out = Shape4::new(1, p.stem_out, hw1, hw1);
    acc.mac(
        "stem".into(),
        stem_out,
        (hw1 * hw1) as u64 * (3 * p.stem_out * 9) as u64,
        (3 * p.stem_out * 9) as u64,
    );
    if p.maxpool {
        let hw2 = hw1.div_ceil(2);
        let out = Shape4::new(1, p.stem_out, hw2, hw2);
        acc.aux("stem.pool".into(), out, 9 * out.elems() as u64);
    }

    for bp in &p.blocks {
        let name = format!("block{:02}", bp.index);
        let (d_in, d_out, m) = (bp.in_channels, bp.out_channels, bp.mid_channels);
        let (ih, oh) = (bp.in_hw, bp.out_hw);
        let out_shape = Shape4::new(1, d_out, oh, oh);
        acc.bn_relu(format!("{name}.bn1"), d_in, ih);
        if bp.bottleneck {
            acc.mac(
                format!("{name}.conv1"),
                Shape4::new(1, m, ih, ih),
                (ih * ih * d_in * m) as u64,
                (d_in * m) as u64,
            );
            acc.bn_relu(format!("{name}.bn2"), m, ih);
            if bp.sb {
                let pat = pattern.as_ref().expect("sb plan without pattern");
                let half = m / 2;
                sb_rows(&mut acc, &name, pat, config.sb.downsample_mode, ih, m, half, m, false);
            } else {
                acc.mac(
                    format!("{name}.conv2"),
                    Shape4::new(1, m, oh, oh),
                    (oh * oh * m * m * 9) as u64,
                    (m * m * 9) as u64,
                );
            }
            acc.bn_relu(format!("{name}.bn3"), m, oh);
            acc.mac(
                format!("{name}.conv3"),
                out_shape,
                (oh * oh * m * d_out) as u64,
                (m * d_out) as u64,
            );
        } else if bp.sb {
            let pat = pattern.as_ref().expect("sb plan without pattern");
            sb_rows(&mut acc, &name, pat, config.sb.downsample_mode, ih, d_in, d_out, d_out, true);
        } else {
            acc.mac(
                format!("{name}.conv1"),
                Shape4::new(1, d_out, oh, oh),
                (oh * oh * d_in * d_out * 9) as u64,
                (d_in * d_out * 9) as u64,
            );
            acc.bn_relu(format!("{name}.bn2"), d_out, oh);
            acc.mac(
                format!("{name}.conv2"),
                out_shape,
                (oh * oh * d_out * d_out * 9) as u64,
                (d_out * d_out * 9) as u64,
            );
        }
        if bp.projection {
            acc.mac(
                format!("{name}.proj"),
                out_shape,
                (oh * oh * d_in * d_out) as u64,
                (d_in * d_out) as u64,
            );
        }
        acc.aux(format!("{name}.add"), out_shape, out_shape.elems() as u64);
    }

    acc.bn_relu("final_bn".into(), p.final_channels, p.final_hw);
    let pooled = Shape4::new(1, p.final_channels, 1, 1);
    acc.aux("avgpool".into(), pooled, (p.final_channels * p.final_hw * p.final_hw) as u64);
    acc.mac(
        "fc".into(),
        Shape4::new(1, config.num_classes, 1, 1),
        (p.final_channels * config.num_classes) as u64,
        (p.final_channels * config.num_classes) as u64,
    );

    let total_macs = acc.rows.iter().map(|r| r.macs).sum();
    let total_params = acc.rows.iter().map(|r| r.params).sum();
    let total_aux_ops = acc.rows.iter().map(|r| r.aux_ops).sum();
    Ok(CostReport { config: config.clone(), rows: acc.rows, total_macs, total_params, total_aux_ops })
}

/// Rows for one conv/deconv module. The conv maps `c_in` to `c_mid`, the
/// deconv maps `c_mid` back to `c_out`; compact position counts are summed
/// offset by offset, so odd maps are costed exactly.
#[allow(clippy::too_many_arguments)]
fn sb_rows(
    acc: &mut Acc,
    block: &str,
    pattern: &SamplingPattern,
    mode: DownsampleMode,
    hw: usize,
    c_in: usize,
    c_mid: usize,
    c_out: usize,
    inner_bn: bool,
) {
    let k = pattern.stride();
    let q_total: u64 = pattern.offsets().iter().map(|&o| positions(hw, k, o)).sum();
    let q0 = (hw - pattern.offsets()[0].0).div_ceil(k);
    let compact = Shape4::new(1, c_mid, q0, q0);
    if mode == DownsampleMode::AvgpoolConv {
        acc.aux(format!("{block}.sb.pool"), Shape4::new(1, c_in, q0, q0), q_total * (c_in * k * k) as u64);
    }
    acc.mac(
        format!("{block}.sb.conv[x{}]", pattern.offsets().len()),
        compact,
        q_total * (c_in * c_mid * 9) as u64,
        (c_in * c_mid * 9) as u64,
    );
    if inner_bn {
        acc.rows.push(LayerCost {
            name: format!("{block}.sb.bn"),
            out: compact,
            macs: 0,
            params: 2 * c_mid as u64,
            aux_ops: 2 * q_total * c_mid as u64,
        });
    }
    acc.mac(
        format!("{block}.sb.deconv[x{}]", pattern.offsets().len()),
        Shape4::new(1, c_out, hw, hw),
        q_total * (c_mid * c_out * 9) as u64,
        (c_mid * c_out * 9) as u64,
    );
}

pub fn total_macs(config: &NetworkConfig) -> Result<u64, NetError> {
    Ok(analyze(config)?.total_macs)
}

/// An exact reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Fraction {
        assert!(den != 0);
        let g = gcd(num, den).max(1);
        Fraction { num: num / g, den: den / g }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Fraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Fraction of a plain two-conv block's MACs removed by sampling `m` of
/// the `k^2` subsets (even map sizes): both convolutions shrink together,
/// so the saving is (k^2 - m) / k^2.
pub fn regular_block_reduction(pattern: &SamplingPattern) -> Fraction {
    let (m, grid) = pattern.density();
    Fraction::new((grid - m) as u64, grid as u64)
}

/// Fraction of a channel-bottleneck block's MACs removed when the middle
/// 3x3 becomes the module at half its width (even map sizes). With io
/// width = expansion x mid, per-position block cost is
/// (2 expansion + 9) m^2 and the middle keeps m/k^2 of its work, giving
/// 9 (k^2 - m) / (k^2 (2 expansion + 9)).
pub fn bottleneck_block_reduction(pattern: &SamplingPattern, expansion: usize) -> Fraction {
    let (m, grid) = pattern.density();
    Fraction::new(
        9 * (grid - m) as u64,
        (grid * (2 * expansion + 9)) as u64,
    )
}

/// One published complexity figure and the matching computed total.
#[derive(Clone, Debug, Serialize)]
pub struct TableRow {
    pub family: Family,
    pub depth: usize,
    pub sb: bool,
    pub computed: u64,
    pub published: f64,
    /// computed / published - 1.
    pub rel_dev: f64,
}

#[derive(Clone, Copy)]
pub struct Published {
    pub depth: usize,
    pub base: f64,
    pub sbn: f64,
}

/// Reference totals as printed in the literature for these families, in
/// raw MACs (the sources print M or G units).
pub const CIFAR_REGULAR_PUBLISHED: [Published; 5] = [
    Published { depth: 20, base: 40.5e6, sbn: 24.0e6 },
    Published { depth: 44, base: 97.2e6, sbn: 52.3e6 },
    Published { depth: 62, base: 139.6e6, sbn: 73.6e6 },
    Published { depth: 86, base: 193.6e6, sbn: 101.9e6 },
    Published { depth: 110, base: 252.9e6, sbn: 130.0e6 },
];

pub const CIFAR_BOTTLENECK_PUBLISHED: [Published; 5] = [
    Published { depth: 29, base: 34.5e6, sbn: 27.5e6 },
    Published { depth: 47, base: 57.1e6, sbn: 42.9e6 },
    Published { depth: 65, base: 79.6e6, sbn: 58.4e6 },
    Published { depth: 83, base: 102.3e6, sbn: 73.8e6 },
    Published { depth: 101, base: 125.0e6, sbn: 89.3e6 },
];

pub const IMAGENET_PUBLISHED: [Published; 4] = [
    Published { depth: 18, base: 1.6e9, sbn: 1.0e9 },
    Published { depth: 34, base: 3.5e9, sbn: 2.0e9 },
    Published { depth: 50, base: 3.7e9, sbn: 2.9e9 },
    Published { depth: 101, base: 7.4e9, sbn: 5.7e9 },
];

fn compare(family: Family, classes: usize, published: &[Published]) -> Result<Vec<TableRow>, NetError> {
    let mut rows = Vec::new();
    for p in published {
        let base_cfg = NetworkConfig::new(family, p.depth, classes);
        let sbn_cfg = base_cfg.clone().with_sb("2/4", DownsampleMode::StridedConv);
        for (sb, cfg, pub_macs) in [(false, base_cfg, p.base), (true, sbn_cfg, p.sbn)] {
            let computed = total_macs(&cfg)?;
            rows.push(TableRow {
                family,
                depth: p.depth,
                sb,
                computed,
                published: pub_macs,
                rel_dev: computed as f64 / pub_macs - 1.0,
            });
        }
    }
    Ok(rows)
}

pub fn compare_cifar_regular() -> Result<Vec<TableRow>, NetError> {
    compare(Family::CifarRegular, 10, &CIFAR_REGULAR_PUBLISHED)
}

pub fn compare_cifar_bottleneck() -> Result<Vec<TableRow>, NetError> {
    compare(Family::CifarBottleneck, 10, &CIFAR_BOTTLENECK_PUBLISHED)
}

pub fn compare_imagenet() -> Result<Vec<TableRow>, NetError> {
    let mut rows = compare(Family::ImagenetRegular, 1000, &IMAGENET_PUBLISHED[..2])?;
    rows.extend(compare(Family::ImagenetBottleneck, 1000, &IMAGENET_PUBLISHED[2..])?);
    Ok(rows)
}

/// A linear stage in a receptive-field probe chain.
pub enum RfOp {
    DenseConv { ksize: usize },
    SbModule { pattern: SamplingPattern, ksize: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfResult {
    /// Inclusive input-row and column ranges that influence the probe.
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub extent: (usize, usize),
    pub count: usize,
}

/// Trace which input positions influence one output position, by pulling
/// a one-hot cotangent back through the chain with all-positive surrogate
/// weights (all ones), so no contribution can cancel.
pub fn probe_receptive_field(
    chain: &[RfOp],
    hw: (usize, usize),
    out_pos: (usize, usize),
) -> Result<RfResult, OpError> {
    assert!(out_pos.0 < hw.0 && out_pos.1 < hw.1, "probe position inside the map");
    let mut cot = Tensor4::zeros(Shape4::new(1, 1, hw.0, hw.1));
    cot.data_mut()[out_pos.0 * hw.1 + out_pos.1] = 1.0;
    for op in chain.iter().rev() {
        match op {
            RfOp::DenseConv { ksize } => {
                let k = ConvKernel::new(Tensor4::filled(Shape4::new(1, 1, *ksize, *ksize), 1.0))?;
                cot = deconv2d_forward(&cot, &k, ConvSpec::dense(*ksize), hw)?;
            }
            RfOp::SbModule { pattern, ksize } => {
                let k = ConvKernel::new(Tensor4::filled(Shape4::new(1, 1, *ksize, *ksize), 1.0))?;
                let mut acc = Tensor4::zeros(cot.shape());
                for i in 0..pattern.offsets().len() {
                    let spec = pattern.spec(i, *ksize);
                    // Pullback of the deconv is the forward conv; pullback
                    // of the conv is the deconv.
                    let mid = conv2d_forward(&cot, &k, spec)?;
                    let back = deconv2d_forward(&mid, &k, spec, hw)?;
                    acc.add_scaled(&back, 1.0)?;
                }
                cot = acc;
            }
        }
    }
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    let mut count = 0;
    for y in 0..hw.0 {
        for x in 0..hw.1 {
            if cot.at(0, 0, y, x) != 0.0 {
                count += 1;
                rows = (rows.0.min(y), rows.1.max(y));
                cols = (cols.0.min(x), cols.1.max(x));
            }
        }
    }
    assert!(count > 0, "probe reached no input positions");
    Ok(RfResult { rows, cols, extent: (rows.1 - rows.0 + 1, cols.1 - cols.0 + 1), count })
}
