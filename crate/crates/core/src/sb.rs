//! The spatial bottleneck module: an offset-strided convolution into a
//! compact map, an optional pointwise stage, and a strided deconvolution
//! back to full resolution, summed over a set of sampling offsets.
//!
//! One convolution kernel and one deconvolution kernel are shared by every
//! offset. Subset contributions are added in the listed order, so the
//! output of a pattern equals the running sum of its single-offset parts
//! bit for bit, and running statistics see the subsets in a fixed order.

use serde::{Deserialize, Serialize};

use crate::ops::{
    avgpool_offset_vjp, batchnorm_eval, batchnorm_train, bn_backward, conv2d_forward, conv2d_vjp,
    deconv2d_forward, deconv2d_vjp, relu, BnCache, ConvBack, ConvKernel, ConvSpec, DeconvBack,
    OpError, RunningStats,
};
use crate::tensor::{Shape4, Tensor4};

/// Which dense positions each subset reads: all positions congruent to one
/// of `offsets` modulo `stride`. Offset order is meaningful and preserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingPattern {
    stride: usize,
    offsets: Vec<(usize, usize)>,
}

impl SamplingPattern {
    /// The stride-2 patterns with conventional names: "1/4" is the single
    /// even-even phase, "2/4" the chessboard pair, "3/4" adds one more
    /// phase, "full" covers all four (dense computation, staged).
    pub fn named(name: &str) -> Result<Self, OpError> {
        let offsets: Vec<(usize, usize)> = match name {
            "1/4" => vec![(0, 0)],
            "2/4" => vec![(0, 0), (1, 1)],
            "3/4" => vec![(0, 0), (0, 1), (1, 1)],
            "full" | "4/4" => vec![(0, 0), (0, 1), (1, 0), (1, 1)],
            other => return Err(OpError::UnknownPattern(other.to_string())),
        };
        Ok(SamplingPattern { stride: 2, offsets })
    }

    pub fn single(stride: usize, offset: (usize, usize)) -> Result<Self, OpError> {
        Self::custom(stride, vec![offset])
    }

    pub fn full(stride: usize) -> Self {
        let offsets = (0..stride)
            .flat_map(|a| (0..stride).map(move |b| (a, b)))
            .collect();
        SamplingPattern { stride, offsets }
    }

    pub fn custom(stride: usize, offsets: Vec<(usize, usize)>) -> Result<Self, OpError> {
        if stride == 0 {
            return Err(OpError::BadStride);
        }
        if offsets.is_empty() {
            return Err(OpError::BadPattern("no offsets".into()));
        }
        for (i, &(a, b)) in offsets.iter().enumerate() {
            if a >= stride || b >= stride {
                return Err(OpError::BadOffset(a, b, stride));
            }
            if offsets[..i].contains(&(a, b)) {
                return Err(OpError::BadPattern(format!("duplicate offset ({a}, {b})")));
            }
        }
        Ok(SamplingPattern { stride, offsets })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    /// (subsets used, subsets in a full grid).
    pub fn density(&self) -> (usize, usize) {
        (self.offsets.len(), self.stride * self.stride)
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.offsets.len(), self.stride * self.stride)
    }

    pub fn spec(&self, subset: usize, ksize: usize) -> ConvSpec {
        ConvSpec::new(self.stride, self.offsets[subset], ksize)
            .expect("pattern offsets validated at construction")
    }
}

/// How the module reaches the compact resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    /// Offset-strided convolution straight to the compact map.
    StridedConv,
    /// Offset-anchored average pool to the compact resolution, then the
    /// same-shape convolution applied densely on the pooled map.
    AvgpoolConv,
}

/// The pointwise stage between convolution and deconvolution.
/// Parameters are shared across subsets; each subset updates the running
/// statistics once, in pattern order.
pub enum Inner<'a> {
    None,
    BnRelu { gamma: &'a Tensor4, beta: &'a Tensor4 },
}

fn check_sb_args(x: &Tensor4, conv: &ConvKernel, deconv: &ConvKernel) -> Result<(), OpError> {
    if conv.ksize() != deconv.ksize() || conv.out_channels() != deconv.out_channels() {
        return Err(OpError::KernelMismatch {
            kernel: deconv.weights.shape(),
            input: conv.weights.shape(),
        });
    }
    if x.shape().c != conv.in_channels() {
        return Err(OpError::KernelMismatch { kernel: conv.weights.shape(), input: x.shape() });
    }
    Ok(())
}

fn compact_stage_eval(
    x: &Tensor4,
    conv: &ConvKernel,
    spec: ConvSpec,
    mode: DownsampleMode,
) -> Result<Tensor4, OpError> {
    match mode {
        DownsampleMode::StridedConv => conv2d_forward(x, conv, spec),
        DownsampleMode::AvgpoolConv => {
            let pooled = crate::ops::avgpool_offset(x, spec.stride, spec.offset)?;
            conv2d_forward(&pooled, conv, ConvSpec::dense(spec.ksize))
        }
    }
}

/// Inference-mode forward. `stats` must be given iff `inner` is `BnRelu`.
pub fn sb_forward_eval(
    x: &Tensor4,
    conv: &ConvKernel,
    deconv: &ConvKernel,
    pattern: &SamplingPattern,
    mode: DownsampleMode,
    inner: Inner<'_>,
    stats: Option<&RunningStats>,
) -> Result<Tensor4, OpError> {
    check_sb_args(x, conv, deconv)?;
    let s = x.shape();
    let mut out = Tensor4::zeros(Shape4::new(s.n, deconv.in_channels(), s.h, s.w));
    for i in 0..pattern.offsets().len() {
        let spec = pattern.spec(i, conv.ksize());
        let mid = compact_stage_eval(x, conv, spec, mode)?;
        let mid = match &inner {
            Inner::None => mid,
            Inner::BnRelu { gamma, beta } => {
                let st = stats.expect("BnRelu inner requires running stats");
                relu(&batchnorm_eval(&mid, gamma, beta, st)?)
            }
        };
        let z = deconv2d_forward(&mid, deconv, spec, (s.h, s.w))?;
        out.add_scaled(&z, 1.0)?;
    }
    Ok(out)
}

struct SubsetBack {
    pool: Option<Box<dyn Fn(&Tensor4) -> Tensor4>>,
    conv: ConvBack,
    inner: Option<(BnCache, Tensor4)>,
    deconv: DeconvBack,
}

/// Gradients produced by `SbBack::pull`.
pub struct SbGrads {
    pub dx: Tensor4,
    pub d_conv: Tensor4,
    pub d_deconv: Tensor4,
    pub d_gamma: Option<Tensor4>,
    pub d_beta: Option<Tensor4>,
}

pub struct SbBack {
    subsets: Vec<SubsetBack>,
    in_shape: Shape4,
}

impl SbBack {
    pub fn pull(&self, dy: &Tensor4) -> SbGrads {
        let mut dx = Tensor4::zeros(self.in_shape);
        let mut d_conv: Option<Tensor4> = None;
        let mut d_deconv: Option<Tensor4> = None;
        let mut d_gamma: Option<Tensor4> = None;
        let mut d_beta: Option<Tensor4> = None;
        let add = |slot: &mut Option<Tensor4>, t: Tensor4| match slot {
            None => *slot = Some(t),
            Some(acc) => acc.add_scaled(&t, 1.0).expect("gradient accumulation shape"),
        };
        for sub in &self.subsets {
            let (dmid_post, dw_dec) = sub.deconv.pull(dy);
            add(&mut d_deconv, dw_dec);
            let dmid = match &sub.inner {
                None => dmid_post,
                Some((bn_cache, bn_out)) => {
                    let dpre = bn_out
                        .zip_map(&dmid_post, |pre, g| if pre > 0.0 { g } else { 0.0 })
                        .expect("relu cotangent shape");
                    let (dm, dg, db) = bn_backward(bn_cache, &dpre);
                    add(&mut d_gamma, dg);
                    add(&mut d_beta, db);
                    dm
                }
            };
            let (dstage, dw_conv) = sub.conv.pull(&dmid);
            add(&mut d_conv, dw_conv);
            let dxi = match &sub.pool {
                None => dstage,
                Some(back) => back(&dstage),
            };
            dx.add_scaled(&dxi, 1.0).expect("input gradient shape");
        }
        SbGrads {
            dx,
            d_conv: d_conv.expect("at least one subset"),
            d_deconv: d_deconv.expect("at least one subset"),
            d_gamma,
            d_beta,
        }
    }
}

/// Training-mode forward that also builds the backward state. With a
/// `BnRelu` inner, `stats` is updated once per subset, in pattern order.
#[allow(clippy::too_many_arguments)]
pub fn sb_vjp(
    x: &Tensor4,
    conv: &ConvKernel,
    deconv: &ConvKernel,
    pattern: &SamplingPattern,
    mode: DownsampleMode,
    inner: Inner<'_>,
    stats: Option<&mut RunningStats>,
) -> Result<(Tensor4, SbBack), OpError> {
    check_sb_args(x, conv, deconv)?;
    let s = x.shape();
    let mut out = Tensor4::zeros(Shape4::new(s.n, deconv.in_channels(), s.h, s.w));
    let mut subsets = Vec::with_capacity(pattern.offsets().len());
    let mut stats = stats;
    for i in 0..pattern.offsets().len() {
        let spec = pattern.spec(i, conv.ksize());
        let (pool, stage_in) = match mode {
            DownsampleMode::StridedConv => (None, None),
            DownsampleMode::AvgpoolConv => {
                let (pooled, back) = avgpool_offset_vjp(x, spec.stride, spec.offset)?;
                (Some(Box::new(back) as Box<dyn Fn(&Tensor4) -> Tensor4>), Some(pooled))
            }
        };
        let conv_spec = if pool.is_some() { ConvSpec::dense(spec.ksize) } else { spec };
        let (mid, conv_back) = conv2d_vjp(stage_in.as_ref().unwrap_or(x), conv, conv_spec)?;
        let (mid, inner_cache) = match &inner {
            Inner::None => (mid, None),
            Inner::BnRelu { gamma, beta } => {
                let st = stats.as_deref_mut().expect("BnRelu inner requires running stats");
                let (bn_out, bn_cache) = batchnorm_train(&mid, gamma, beta, st)?;
                (relu(&bn_out), Some((bn_cache, bn_out)))
            }
        };
        let (z, deconv_back) = deconv2d_vjp(&mid, deconv, spec, (s.h, s.w))?;
        out.add_scaled(&z, 1.0)?;
        subsets.push(SubsetBack { pool, conv: conv_back, inner: inner_cache, deconv: deconv_back });
    }
    Ok((out, SbBack { subsets, in_shape: s }))
}
