//! Residual classifier families and their spatial-bottleneck variants.
//!
//! Four families are supported, all pre-activation: two for 32x32 inputs
//! (plain two-conv blocks at depth 6n+2, bottleneck blocks at depth 9n+2)
//! and two for 224x224 inputs (depths 18/34 plain, 50/101 bottleneck).
//! Enabling the spatial bottleneck rewrites every stride-1 block: a plain
//! block's two 3x3 convolutions become the module's conv/deconv pair with
//! a shared BN+ReLU between them, and a bottleneck block's middle 3x3
//! becomes a conv to half its width and a deconv back, with no inner
//! nonlinearity. Stride-2 blocks always keep their regular convolutions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ops::{
    batchnorm_eval, batchnorm_train, bn_backward, conv2d_forward, conv2d_ref, conv2d_vjp,
    deconv2d_ref, global_avgpool, global_avgpool_vjp, linear, linear_ref, linear_vjp, maxpool,
    maxpool_vjp, relu, subsample, subsample_vjp, BnCache, ConvBack, ConvKernel, ConvSpec, OpError,
    RunningStats,
};
use crate::rng::SbRng;
use crate::sb::{sb_forward_eval, sb_vjp, DownsampleMode, Inner, SamplingPattern, SbBack};
use crate::tensor::{Shape4, Tensor4, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("family {family} does not support depth {depth}: {rule}")]
    BadDepth { family: Family, depth: usize, rule: &'static str },
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint problem: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CifarRegular,
    CifarBottleneck,
    ImagenetRegular,
    ImagenetBottleneck,
}

impl Family {
    pub fn is_cifar(self) -> bool {
        matches!(self, Family::CifarRegular | Family::CifarBottleneck)
    }

    pub fn is_bottleneck(self) -> bool {
        matches!(self, Family::CifarBottleneck | Family::ImagenetBottleneck)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::CifarRegular => "cifar_regular",
            Family::CifarBottleneck => "cifar_bottleneck",
            Family::ImagenetRegular => "imagenet_regular",
            Family::ImagenetBottleneck => "imagenet_bottleneck",
        };
        f.write_str(s)
    }
}

fn default_pattern() -> String {
    "2/4".to_string()
}

impl Default for DownsampleMode {
    fn default() -> Self {
        DownsampleMode::StridedConv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_pattern")]
    pub pattern: String,
    #[serde(default)]
    pub downsample_mode: DownsampleMode,
}

impl Default for SbConfig {
    fn default() -> Self {
        SbConfig { enabled: false, pattern: default_pattern(), downsample_mode: DownsampleMode::StridedConv }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub family: Family,
    pub depth: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub sb: SbConfig,
}

impl NetworkConfig {
    pub fn new(family: Family, depth: usize, num_classes: usize) -> Self {
        NetworkConfig { family, depth, num_classes, sb: SbConfig::default() }
    }

    pub fn with_sb(mut self, pattern: &str, mode: DownsampleMode) -> Self {
        self.sb = SbConfig { enabled: true, pattern: pattern.to_string(), downsample_mode: mode };
        self
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let cfg: NetworkConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), NetError> {
        match self.family {
            Family::CifarRegular => {
                if self.depth < 8 || (self.depth - 2) % 6 != 0 {
                    return Err(NetError::BadDepth { family: self.family, depth: self.depth, rule: "depth must be 6n + 2" });
                }
            }
            Family::CifarBottleneck => {
                if self.depth < 11 || (self.depth - 2) % 9 != 0 {
                    return Err(NetError::BadDepth { family: self.family, depth: self.depth, rule: "depth must be 9n + 2" });
                }
            }
            Family::ImagenetRegular => {
                if self.depth != 18 && self.depth != 34 {
                    return Err(NetError::BadDepth { family: self.family, depth: self.depth, rule: "depth must be 18 or 34" });
                }
            }
            Family::ImagenetBottleneck => {
                if self.depth != 50 && self.depth != 101 {
                    return Err(NetError::BadDepth { family: self.family, depth: self.depth, rule: "depth must be 50 or 101" });
                }
            }
        }
        if self.num_classes < 2 {
            return Err(NetError::BadConfig("need at least two classes".into()));
        }
        if self.sb.enabled {
            SamplingPattern::named(&self.sb.pattern)?;
        }
        Ok(())
    }

    pub fn pattern(&self) -> Result<SamplingPattern, NetError> {
        Ok(SamplingPattern::named(&self.sb.pattern)?)
    }
}

/// Static description of one residual block, shared by the builder and the
/// cost model.
#[derive(Clone, Copy, Debug)]
pub struct BlockPlan {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the 3x3 path; equals `out_channels` in regular blocks.
    pub mid_channels: usize,
    pub stride: usize,
    pub in_hw: usize,
    pub out_hw: usize,
    pub bottleneck: bool,
    /// True when this block carries the conv/deconv module.
    pub sb: bool,
    /// 1x1 projection shortcut (otherwise identity or pad).
    pub projection: bool,
}

/// Static description of a whole network at its native input size.
#[derive(Clone, Debug)]
pub struct NetPlan {
    pub config: NetworkConfig,
    pub input_hw: usize,
    pub stem_out: usize,
    pub stem_stride: usize,
    pub maxpool: bool,
    pub blocks: Vec<BlockPlan>,
    pub final_channels: usize,
    pub final_hw: usize,
}

/// Expand a config into the block-by-block plan.
pub fn plan(config: &NetworkConfig) -> Result<NetPlan, NetError> {
    config.validate()?;
    let family = config.family;
    let (mids, counts, strides, input_hw): (Vec<usize>, Vec<usize>, Vec<usize>, usize) = match family {
        Family::CifarRegular => {
            let n = (config.depth - 2) / 6;
            (vec![16, 32, 64], vec![n; 3], vec![1, 2, 2], 32)
        }
        Family::CifarBottleneck => {
            let n = (config.depth - 2) / 9;
            (vec![16, 32, 64], vec![n; 3], vec![1, 2, 2], 32)
        }
        Family::ImagenetRegular => {
            let counts = if config.depth == 18 { vec![2, 2, 2, 2] } else { vec![3, 4, 6, 3] };
            (vec![64, 128, 256, 512], counts, vec![1, 2, 2, 2], 224)
        }
        Family::ImagenetBottleneck => {
            let counts = if config.depth == 50 { vec![3, 4, 6, 3] } else { vec![3, 4, 23, 3] };
            (vec![64, 128, 256, 512], counts, vec![1, 2, 2, 2], 224)
        }
    };
    let bottleneck = family.is_bottleneck();
    let expansion = if bottleneck { 4 } else { 1 };
    let (stem_out, stem_stride, maxpool) = if family.is_cifar() { (16, 1, false) } else { (64, 2, true) };
    let mut hw = input_hw / stem_stride;
    if maxpool {
        hw = hw.div_ceil(2);
    }
    let mut blocks = Vec::new();
    let mut in_c = stem_out;
    let mut index = 0;
    for (si, (&mid, &count)) in mids.iter().zip(counts.iter()).enumerate() {
        let out_c = mid * expansion;
        for bi in 0..count {
            let stride = if bi == 0 { strides[si] } else { 1 };
            let in_hw = hw;
            let out_hw = hw.div_ceil(stride);
            let sb = config.sb.enabled && stride == 1;
            let projection = !family.is_cifar() && (in_c != out_c || stride != 1);
            blocks.push(BlockPlan {
                index,
                in_channels: in_c,
                out_channels: out_c,
                mid_channels: mid,
                stride,
                in_hw,
                out_hw,
                bottleneck,
                sb,
                projection,
            });
            in_c = out_c;
            hw = out_hw;
            index += 1;
        }
    }
    Ok(NetPlan {
        config: config.clone(),
        input_hw,
        stem_out,
        stem_stride,
        maxpool,
        blocks,
        final_channels: in_c,
        final_hw: hw,
    })
}

/// One trainable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
    pub vel: Tensor4,
}

impl Param {
    fn new(name: String, value: Tensor4) -> Self {
        let z = Tensor4::zeros(value.shape());
        Param { name, value, grad: z.clone(), vel: z }
    }

    /// Disjoint views for an optimizer step: mutable value and velocity,
    /// read-only gradient.
    pub fn split_mut(&mut self) -> (&mut [f64], &[f64], &mut [f64]) {
        let value = self.value.data_mut();
        let grad = self.grad.data();
        let vel = self.vel.data_mut();
        (value, grad, vel)
    }
}

struct BnSlot {
    gamma: usize,
    beta: usize,
    stats: RunningStats,
}

struct SbSlot {
    conv: usize,
    deconv: usize,
    inner_bn: Option<BnSlot>,
    pattern: SamplingPattern,
    mode: DownsampleMode,
}

enum ShortcutKind {
    Identity,
    Pad { stride: usize },
    Proj { w: usize, spec: ConvSpec },
}

struct Block {
    plan: BlockPlan,
    bn1: BnSlot,
    conv1: Option<(usize, ConvSpec)>,
    bn2: Option<BnSlot>,
    conv2: Option<(usize, ConvSpec)>,
    bn3: Option<BnSlot>,
    conv3: Option<(usize, ConvSpec)>,
    sb: Option<SbSlot>,
    shortcut: ShortcutKind,
}

enum ShortcutCache {
    Identity,
    Pad { in_shape: Shape4, stride: usize },
    Proj(ConvBack),
}

struct BnOut {
    cache: BnCache,
    /// Pre-ReLU activations, kept for the ReLU mask.
    pre: Tensor4,
}

pub struct BlockCache {
    bn1: BnOut,
    conv1: Option<ConvBack>,
    bn2: Option<BnOut>,
    conv2: Option<ConvBack>,
    bn3: Option<BnOut>,
    conv3: Option<ConvBack>,
    sb: Option<SbBack>,
    shortcut: ShortcutCache,
}

pub struct NetCache {
    stem: ConvBack,
    pool: Option<Box<dyn Fn(&Tensor4) -> Tensor4>>,
    blocks: Vec<BlockCache>,
    final_bn: BnOut,
    gap: Box<dyn Fn(&Tensor4) -> Tensor4>,
    #[allow(clippy::type_complexity)]
    fc: Box<dyn Fn(&Tensor4) -> (Tensor4, Tensor4)>,
}

fn kernel(params: &[Param], h: usize) -> ConvKernel {
    ConvKernel::new(params[h].value.clone()).expect("kernel shape fixed at build")
}

fn bn_train_step(params: &[Param], bn: &mut BnSlot, x: &Tensor4) -> Result<(Tensor4, BnOut), NetError> {
    let (y, cache) = batchnorm_train(x, &params[bn.gamma].value, &params[bn.beta].value, &mut bn.stats)?;
    let act = relu(&y);
    Ok((act, BnOut { cache, pre: y }))
}

fn bn_eval_step(params: &[Param], bn: &BnSlot, x: &Tensor4) -> Result<Tensor4, NetError> {
    Ok(relu(&batchnorm_eval(x, &params[bn.gamma].value, &params[bn.beta].value, &bn.stats)?))
}

/// ReLU mask then batch-norm backward; accumulates the BN param grads.
fn bn_back_step(params: &mut [Param], bn: &BnSlot, out: &BnOut, d_act: &Tensor4) -> Tensor4 {
    let d_pre = out
        .pre
        .zip_map(d_act, |p, g| if p > 0.0 { g } else { 0.0 })
        .expect("relu cotangent shape");
    let (dx, dg, db) = bn_backward(&out.cache, &d_pre);
    params[bn.gamma].grad.add_scaled(&dg, 1.0).expect("gamma grad shape");
    params[bn.beta].grad.add_scaled(&db, 1.0).expect("beta grad shape");
    dx
}

fn pad_channels(x: &Tensor4, out_c: usize) -> Tensor4 {
    let s = x.shape();
    debug_assert!(out_c >= s.c);
    let mut y = Tensor4::zeros(Shape4::new(s.n, out_c, s.h, s.w));
    let plane = s.h * s.w;
    let yd = y.data_mut();
    for img in 0..s.n {
        let src = &x.data()[img * s.c * plane..(img + 1) * s.c * plane];
        yd[img * out_c * plane..img * out_c * plane + s.c * plane].copy_from_slice(src);
    }
    y
}

fn unpad_channels(dy: &Tensor4, in_c: usize) -> Tensor4 {
    let s = dy.shape();
    let plane = s.h * s.w;
    let mut dx = Tensor4::zeros(Shape4::new(s.n, in_c, s.h, s.w));
    let dxd = dx.data_mut();
    for img in 0..s.n {
        let src = &dy.data()[img * s.c * plane..img * s.c * plane + in_c * plane];
        dxd[img * in_c * plane..(img + 1) * in_c * plane].copy_from_slice(src);
    }
    dx
}

impl Block {
    fn shortcut_forward(&self, params: &[Param], x: &Tensor4) -> Result<(Tensor4, ShortcutCache), NetError> {
        match &self.shortcut {
            ShortcutKind::Identity => Ok((x.clone(), ShortcutCache::Identity)),
            ShortcutKind::Pad { stride } => {
                let sub = if *stride > 1 { subsample(x, *stride) } else { x.clone() };
                Ok((
                    pad_channels(&sub, self.plan.out_channels),
                    ShortcutCache::Pad { in_shape: x.shape(), stride: *stride },
                ))
            }
            ShortcutKind::Proj { w, spec } => {
                let (y, back) = conv2d_vjp(x, &kernel(params, *w), *spec)?;
                Ok((y, ShortcutCache::Proj(back)))
            }
        }
    }

    fn shortcut_eval(&self, params: &[Param], x: &Tensor4) -> Result<Tensor4, NetError> {
        match &self.shortcut {
            ShortcutKind::Identity => Ok(x.clone()),
            ShortcutKind::Pad { stride } => {
                let sub = if *stride > 1 { subsample(x, *stride) } else { x.clone() };
                Ok(pad_channels(&sub, self.plan.out_channels))
            }
            ShortcutKind::Proj { w, spec } => Ok(conv2d_forward(x, &kernel(params, *w), *spec)?),
        }
    }

    fn shortcut_backward(&self, params: &mut [Param], cache: &ShortcutCache, dy: &Tensor4) -> Tensor4 {
        match (cache, &self.shortcut) {
            (ShortcutCache::Identity, _) => dy.clone(),
            (ShortcutCache::Pad { in_shape, stride }, _) => {
                let narrow = unpad_channels(dy, in_shape.c);
                if *stride > 1 {
                    // Adjoint of subsample: scatter back onto the grid.
                    let probe = Tensor4::zeros(*in_shape);
                    let (_, back) = subsample_vjp(&probe, *stride);
                    back(&narrow)
                } else {
                    narrow
                }
            }
            (ShortcutCache::Proj(back), ShortcutKind::Proj { w, .. }) => {
                let (dx, dw) = back.pull(dy);
                params[*w].grad.add_scaled(&dw, 1.0).expect("projection grad shape");
                dx
            }
            _ => unreachable!("cache kind matches shortcut kind"),
        }
    }

    fn forward_train(&mut self, params: &[Param], x: &Tensor4) -> Result<(Tensor4, BlockCache), NetError> {
        let (short, short_cache) = self.shortcut_forward(params, x)?;
        let (t1, bn1_out) = bn_train_step(params, &mut self.bn1, x)?;
        let mut cache = BlockCache {
            bn1: bn1_out,
            conv1: None,
            bn2: None,
            conv2: None,
            bn3: None,
            conv3: None,
            sb: None,
            shortcut: short_cache,
        };
        let mut cur = t1;
        if let Some((h, spec)) = self.conv1 {
            let (y, back) = conv2d_vjp(&cur, &kernel(params, h), spec)?;
            cache.conv1 = Some(back);
            cur = y;
        }
        if self.bn2.is_some() {
            let bn2 = self.bn2.as_mut().expect("checked");
            let (y, out) = bn_train_step(params, bn2, &cur)?;
            cache.bn2 = Some(out);
            cur = y;
        }
        if let Some(sb) = self.sb.as_mut() {
            let conv_k = kernel(params, sb.conv);
            let deconv_k = kernel(params, sb.deconv);
            let (inner, stats) = match sb.inner_bn.as_mut() {
                Some(bn) => (
                    Inner::BnRelu { gamma: &params[bn.gamma].value, beta: &params[bn.beta].value },
                    Some(&mut bn.stats),
                ),
                None => (Inner::None, None),
            };
            let (y, back) = sb_vjp(&cur, &conv_k, &deconv_k, &sb.pattern, sb.mode, inner, stats)?;
            cache.sb = Some(back);
            cur = y;
        } else if let Some((h, spec)) = self.conv2 {
            let (y, back) = conv2d_vjp(&cur, &kernel(params, h), spec)?;
            cache.conv2 = Some(back);
            cur = y;
        }
        if self.bn3.is_some() {
            let bn3 = self.bn3.as_mut().expect("checked");
            let (y, out) = bn_train_step(params, bn3, &cur)?;
            cache.bn3 = Some(out);
            cur = y;
        }
        if let Some((h, spec)) = self.conv3 {
            let (y, back) = conv2d_vjp(&cur, &kernel(params, h), spec)?;
            cache.conv3 = Some(back);
            cur = y;
        }
        cur.add_scaled(&short, 1.0)?;
        Ok((cur, cache))
    }

    fn forward_eval(&self, params: &[Param], x: &Tensor4) -> Result<Tensor4, NetError> {
        let short = self.shortcut_eval(params, x)?;
        let mut cur = bn_eval_step(params, &self.bn1, x)?;
        if let Some((h, spec)) = self.conv1 {
            cur = conv2d_forward(&cur, &kernel(params, h), spec)?;
        }
        if let Some(bn2) = &self.bn2 {
            cur = bn_eval_step(params, bn2, &cur)?;
        }
        if let Some(sb) = &self.sb {
            let (inner, stats) = match &sb.inner_bn {
                Some(bn) => (
                    Inner::BnRelu { gamma: &params[bn.gamma].value, beta: &params[bn.beta].value },
                    Some(&bn.stats),
                ),
                None => (Inner::None, None),
            };
            cur = sb_forward_eval(&cur, &kernel(params, sb.conv), &kernel(params, sb.deconv), &sb.pattern, sb.mode, inner, stats)?;
        } else if let Some((h, spec)) = self.conv2 {
            cur = conv2d_forward(&cur, &kernel(params, h), spec)?;
        }
        if let Some(bn3) = &self.bn3 {
            cur = bn_eval_step(params, bn3, &cur)?;
        }
        if let Some((h, spec)) = self.conv3 {
            cur = conv2d_forward(&cur, &kernel(params, h), spec)?;
        }
        cur.add_scaled(&short, 1.0)?;
        Ok(cur)
    }

    /// Eval-mode forward through the naive reference ops, counting every
    /// multiply-accumulate of the conv/deconv/fc work.
    fn forward_counted(&self, params: &[Param], x: &Tensor4, macs: &mut u64) -> Result<Tensor4, NetError> {
        let short = match &self.shortcut {
            ShortcutKind::Proj { w, spec } => conv2d_ref(x, &kernel(params, *w), *spec, macs)?,
            _ => self.shortcut_eval(params, x)?,
        };
        let mut cur = bn_eval_step(params, &self.bn1, x)?;
        if let Some((h, spec)) = self.conv1 {
            cur = conv2d_ref(&cur, &kernel(params, h), spec, macs)?;
        }
        if let Some(bn2) = &self.bn2 {
            cur = bn_eval_step(params, bn2, &cur)?;
        }
        if let Some(sb) = &self.sb {
            let s = cur.shape();
            let conv_k = kernel(params, sb.conv);
            let deconv_k = kernel(params, sb.deconv);
            let mut acc = Tensor4::zeros(Shape4::new(s.n, deconv_k.in_channels(), s.h, s.w));
            for i in 0..sb.pattern.offsets().len() {
                let spec = sb.pattern.spec(i, conv_k.ksize());
                let mid = match sb.mode {
                    DownsampleMode::StridedConv => conv2d_ref(&cur, &conv_k, spec, macs)?,
                    DownsampleMode::AvgpoolConv => {
                        let pooled = crate::ops::avgpool_offset(&cur, spec.stride, spec.offset)?;
                        conv2d_ref(&pooled, &conv_k, ConvSpec::dense(spec.ksize), macs)?
                    }
                };
                let mid = match &sb.inner_bn {
                    Some(bn) => bn_eval_step(params, bn, &mid)?,
                    None => mid,
                };
                let z = deconv2d_ref(&mid, &deconv_k, spec, (s.h, s.w), macs)?;
                acc.add_scaled(&z, 1.0)?;
            }
            cur = acc;
        } else if let Some((h, spec)) = self.conv2 {
            cur = conv2d_ref(&cur, &kernel(params, h), spec, macs)?;
        }
        if let Some(bn3) = &self.bn3 {
            cur = bn_eval_step(params, bn3, &cur)?;
        }
        if let Some((h, spec)) = self.conv3 {
            cur = conv2d_ref(&cur, &kernel(params, h), spec, macs)?;
        }
        cur.add_scaled(&short, 1.0)?;
        Ok(cur)
    }

    fn backward(&self, params: &mut [Param], cache: &BlockCache, dy: &Tensor4) -> Tensor4 {
        let mut cur = dy.clone();
        if let Some((h, _)) = self.conv3 {
            let back = cache.conv3.as_ref().expect("conv3 cache");
            let (dx, dw) = back.pull(&cur);
            params[h].grad.add_scaled(&dw, 1.0).expect("conv3 grad shape");
            cur = dx;
        }
        if let Some(bn3) = &self.bn3 {
            cur = bn_back_step(params, bn3, cache.bn3.as_ref().expect("bn3 cache"), &cur);
        }
        if let Some(sb) = &self.sb {
            let back = cache.sb.as_ref().expect("sb cache");
            let grads = back.pull(&cur);
            params[sb.conv].grad.add_scaled(&grads.d_conv, 1.0).expect("sb conv grad shape");
            params[sb.deconv].grad.add_scaled(&grads.d_deconv, 1.0).expect("sb deconv grad shape");
            if let Some(bn) = &sb.inner_bn {
                params[bn.gamma]
                    .grad
                    .add_scaled(&grads.d_gamma.as_ref().expect("inner bn grads"), 1.0)
                    .expect("sb gamma grad shape");
                params[bn.beta]
                    .grad
                    .add_scaled(&grads.d_beta.as_ref().expect("inner bn grads"), 1.0)
                    .expect("sb beta grad shape");
            }
            cur = grads.dx;
        } else if let Some((h, _)) = self.conv2 {
            let back = cache.conv2.as_ref().expect("conv2 cache");
            let (dx, dw) = back.pull(&cur);
            params[h].grad.add_scaled(&dw, 1.0).expect("conv2 grad shape");
            cur = dx;
        }
        if let Some(bn2) = &self.bn2 {
            cur = bn_back_step(params, bn2, cache.bn2.as_ref().expect("bn2 cache"), &cur);
        }
        if let Some((h, _)) = self.conv1 {
            let back = cache.conv1.as_ref().expect("conv1 cache");
            let (dx, dw) = back.pull(&cur);
            params[h].grad.add_scaled(&dw, 1.0).expect("conv1 grad shape");
            cur = dx;
        }
        let mut dx = bn_back_step(params, &self.bn1, &cache.bn1, &cur);
        let ds = self.shortcut_backward(params, &cache.shortcut, dy);
        dx.add_scaled(&ds, 1.0).expect("shortcut grad shape");
        dx
    }
}

pub struct Network {
    config: NetworkConfig,
    seed: u64,
    plan: NetPlan,
    params: Vec<Param>,
    stem: (usize, ConvSpec),
    blocks: Vec<Block>,
    final_bn: BnSlot,
    fc: usize,
}

struct Builder {
    params: Vec<Param>,
    rng: SbRng,
}

impl Builder {
    fn conv(&mut self, name: String, co: usize, ci: usize, s: usize, fan_in: usize) -> usize {
        let sd = (2.0 / fan_in as f64).sqrt();
        let t = Tensor4::random_normal(Shape4::new(co, ci, s, s), 0.0, sd, &mut self.rng);
        self.params.push(Param::new(name, t));
        self.params.len() - 1
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnSlot {
        let gamma = Tensor4::filled(Shape4::new(1, channels, 1, 1), 1.0);
        let beta = Tensor4::zeros(Shape4::new(1, channels, 1, 1));
        self.params.push(Param::new(format!("{prefix}.gamma"), gamma));
        self.params.push(Param::new(format!("{prefix}.beta"), beta));
        BnSlot { gamma: self.params.len() - 2, beta: self.params.len() - 1, stats: RunningStats::new(channels) }
    }
}

impl Network {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network, NetError> {
        let plan = plan(config)?;
        let mut b = Builder { params: Vec::new(), rng: SbRng::new(seed) };
        let stem_spec = ConvSpec::new(plan.stem_stride, (0, 0), 3)?;
        let stem = (b.conv("stem.w".into(), plan.stem_out, 3, 3, 3 * 9), stem_spec);
        let pattern = if config.sb.enabled { Some(config.pattern()?) } else { None };
        let mut blocks = Vec::new();
        for bp in &plan.blocks {
            let p = format!("block{:02}", bp.index);
            let stride_spec = ConvSpec::new(bp.stride, (0, 0), 3)?;
            let one = ConvSpec::new(1, (0, 0), 1)?;
            let one_strided = ConvSpec::new(bp.stride, (0, 0), 1)?;
            let bn1 = b.bn(&format!("{p}.bn1"), bp.in_channels);
            let mut block = Block {
                plan: *bp,
                bn1,
                conv1: None,
                bn2: None,
                conv2: None,
                bn3: None,
                conv3: None,
                sb: None,
                shortcut: ShortcutKind::Identity,
            };
            let (d_in, d_out, m) = (bp.in_channels, bp.out_channels, bp.mid_channels);
            if bp.bottleneck {
                block.conv1 = Some((b.conv(format!("{p}.conv1.w"), m, d_in, 1, d_in), one));
                block.bn2 = Some(b.bn(&format!("{p}.bn2"), m));
                if bp.sb {
                    let half = m / 2;
                    let pat = pattern.clone().expect("sb block requires pattern");
                    let conv = b.conv(format!("{p}.sb.conv.w"), half, m, 3, m * 9);
                    let deconv = b.conv(format!("{p}.sb.deconv.w"), half, m, 3, m * 9);
                    block.sb = Some(SbSlot {
                        conv,
                        deconv,
                        inner_bn: None,
                        pattern: pat,
                        mode: config.sb.downsample_mode,
                    });
                } else {
                    block.conv2 = Some((b.conv(format!("{p}.conv2.w"), m, m, 3, m * 9), stride_spec));
                }
                block.bn3 = Some(b.bn(&format!("{p}.bn3"), m));
                block.conv3 = Some((b.conv(format!("{p}.conv3.w"), d_out, m, 1, m), one));
            } else if bp.sb {
                let pat = pattern.clone().expect("sb block requires pattern");
                let conv = b.conv(format!("{p}.sb.conv.w"), d_out, d_in, 3, d_in * 9);
                let inner = b.bn(&format!("{p}.sb.bn"), d_out);
                let deconv = b.conv(format!("{p}.sb.deconv.w"), d_out, d_out, 3, d_out * 9);
                block.sb = Some(SbSlot {
                    conv,
                    deconv,
                    inner_bn: Some(inner),
                    pattern: pat,
                    mode: config.sb.downsample_mode,
                });
            } else {
                block.conv1 = Some((b.conv(format!("{p}.conv1.w"), d_out, d_in, 3, d_in * 9), stride_spec));
                block.bn2 = Some(b.bn(&format!("{p}.bn2"), d_out));
                block.conv2 = Some((b.conv(format!("{p}.conv2.w"), d_out, d_out, 3, d_out * 9), ConvSpec::dense(3)));
            }
            block.shortcut = if d_in == d_out && bp.stride == 1 {
                ShortcutKind::Identity
            } else if bp.projection {
                ShortcutKind::Proj { w: b.conv(format!("{p}.proj.w"), d_out, d_in, 1, d_in), spec: one_strided }
            } else {
                ShortcutKind::Pad { stride: bp.stride }
            };
            blocks.push(block);
        }
        let final_bn = b.bn("final_bn", plan.final_channels);
        let fc = b.conv("fc.w".into(), config.num_classes, plan.final_channels, 1, plan.final_channels);
        Ok(Network { config: config.clone(), seed, plan, params: b.params, stem, blocks, final_bn, fc })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn plan(&self) -> &NetPlan {
        &self.plan
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.shape().elems() as u64).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, NetCache), NetError> {
        let params = &self.params;
        let (mut cur, stem_back) = conv2d_vjp(x, &kernel(params, self.stem.0), self.stem.1)?;
        let pool: Option<Box<dyn Fn(&Tensor4) -> Tensor4>> = if self.plan.maxpool {
            let (y, back) = maxpool_vjp(&cur);
            cur = y;
            Some(Box::new(back))
        } else {
            None
        };
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, cache) = block.forward_train(params, &cur)?;
            block_caches.push(cache);
            cur = y;
        }
        let (act, final_out) = bn_train_step(params, &mut self.final_bn, &cur)?;
        let (pooled, gap_back) = global_avgpool_vjp(&act);
        let (logits, fc_back) = linear_vjp(&pooled, &params[self.fc].value)?;
        Ok((
            logits,
            NetCache {
                stem: stem_back,
                pool,
                blocks: block_caches,
                final_bn: final_out,
                gap: Box::new(gap_back),
                fc: Box::new(fc_back),
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4, NetError> {
        let params = &self.params;
        let mut cur = conv2d_forward(x, &kernel(params, self.stem.0), self.stem.1)?;
        if self.plan.maxpool {
            cur = maxpool(&cur).0;
        }
        for block in &self.blocks {
            cur = block.forward_eval(params, &cur)?;
        }
        let act = bn_eval_step(params, &self.final_bn, &cur)?;
        Ok(linear(&global_avgpool(&act), &params[self.fc].value)?)
    }

    /// Eval-mode forward through the reference ops; returns logits and the
    /// number of conv/deconv/fc multiply-accumulates actually performed.
    pub fn forward_counted(&self, x: &Tensor4) -> Result<(Tensor4, u64), NetError> {
        let params = &self.params;
        let mut macs = 0u64;
        let mut cur = conv2d_ref(x, &kernel(params, self.stem.0), self.stem.1, &mut macs)?;
        if self.plan.maxpool {
            cur = maxpool(&cur).0;
        }
        for block in &self.blocks {
            cur = block.forward_counted(params, &cur, &mut macs)?;
        }
        let act = bn_eval_step(params, &self.final_bn, &cur)?;
        let logits = linear_ref(&global_avgpool(&act), &params[self.fc].value, &mut macs)?;
        Ok((logits, macs))
    }

    /// Accumulates parameter gradients; the input gradient is discarded.
    pub fn backward(&mut self, cache: &NetCache, d_logits: &Tensor4) {
        let (d_pool, d_fc) = (cache.fc)(d_logits);
        self.params[self.fc].grad.add_scaled(&d_fc, 1.0).expect("fc grad shape");
        let d_act = (cache.gap)(&d_pool);
        let mut cur = bn_back_step(&mut self.params, &self.final_bn, &cache.final_bn, &d_act);
        for (block, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            cur = block.backward(&mut self.params, bc, &cur);
        }
        if let Some(pool_back) = &cache.pool {
            cur = pool_back(&cur);
        }
        let (_, dw_stem) = cache.stem.pull(&cur);
        self.params[self.stem.0].grad.add_scaled(&dw_stem, 1.0).expect("stem grad shape");
    }

    /// Rebuild this network with the spatial bottleneck enabled, keeping
    /// the values of every parameter whose name and shape still exist.
    /// The conv/deconv kernels of the new modules get fresh seeded values.
    pub fn to_sbn(&self, pattern: &str, mode: DownsampleMode) -> Result<Network, NetError> {
        let cfg = self.config.clone().with_sb(pattern, mode);
        let mut sbn = Network::build(&cfg, self.seed)?;
        let by_name: BTreeMap<&str, &Param> = self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &mut sbn.params {
            if let Some(src) = by_name.get(p.name.as_str()) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                }
            }
        }
        // Carry matching running statistics as well.
        let src_stats: BTreeMap<String, RunningStats> =
            self.stats_slots().into_iter().map(|(n, s)| (n, s.clone())).collect();
        for (name, slot) in sbn.stats_slots_mut() {
            if let Some(src) = src_stats.get(&name) {
                if src.mean.len() == slot.mean.len() {
                    *slot = src.clone();
                }
            }
        }
        Ok(sbn)
    }

    fn stats_slots(&self) -> Vec<(String, &RunningStats)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let p = format!("block{i:02}");
            out.push((format!("{p}.bn1"), &block.bn1.stats));
            if let Some(bn) = &block.bn2 {
                out.push((format!("{p}.bn2"), &bn.stats));
            }
            if let Some(bn) = &block.bn3 {
                out.push((format!("{p}.bn3"), &bn.stats));
            }
            if let Some(sb) = &block.sb {
                if let Some(bn) = &sb.inner_bn {
                    out.push((format!("{p}.sb.bn"), &bn.stats));
                }
            }
        }
        out.push(("final_bn".to_string(), &self.final_bn.stats));
        out
    }

    fn stats_slots_mut(&mut self) -> Vec<(String, &mut RunningStats)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i:02}");
            out.push((format!("{p}.bn1"), &mut block.bn1.stats));
            if let Some(bn) = &mut block.bn2 {
                out.push((format!("{p}.bn2"), &mut bn.stats));
            }
            if let Some(bn) = &mut block.bn3 {
                out.push((format!("{p}.bn3"), &mut bn.stats));
            }
            if let Some(sb) = &mut block.sb {
                if let Some(bn) = &mut sb.inner_bn {
                    out.push((format!("{p}.sb.bn"), &mut bn.stats));
                }
            }
        }
        out.push(("final_bn".to_string(), &mut self.final_bn.stats));
        out
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), NetError> {
        std::fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        let mut write = |name: String, t: &Tensor4| -> Result<(), NetError> {
            let file = format!("{name}.sbt");
            t.save(&dir.join(&file))?;
            let s = t.shape();
            tensors.push(TensorEntry { name, file, shape: [s.n, s.c, s.h, s.w] });
            Ok(())
        };
        for p in &self.params {
            write(p.name.clone(), &p.value)?;
        }
        for (name, stats) in self.stats_slots() {
            let c = stats.mean.len();
            let mean = Tensor4::from_vec(Shape4::new(1, c, 1, 1), stats.mean.clone())?;
            let var = Tensor4::from_vec(Shape4::new(1, c, 1, 1), stats.var.clone())?;
            write(format!("{name}.running_mean"), &mean)?;
            write(format!("{name}.running_var"), &var)?;
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            tensors,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Network, NetError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(NetError::Checkpoint(format!("unknown format '{}'", manifest.format)));
        }
        let mut net = Network::build(&manifest.config, manifest.seed)?;
        let entries: BTreeMap<&str, &TensorEntry> =
            manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut used = 0usize;
        let mut read = |name: &str, want: Shape4| -> Result<Tensor4, NetError> {
            let entry = entries
                .get(name)
                .ok_or_else(|| NetError::Checkpoint(format!("tensor '{name}' missing from manifest")))?;
            let t = Tensor4::load(&dir.join(&entry.file))?;
            if t.shape() != want || entry.shape != [want.n, want.c, want.h, want.w] {
                return Err(NetError::Checkpoint(format!(
                    "tensor '{name}' has shape {}, expected {want}",
                    t.shape()
                )));
            }
            used += 1;
            Ok(t)
        };
        for i in 0..net.params.len() {
            let name = net.params[i].name.clone();
            let want = net.params[i].value.shape();
            net.params[i].value = read(&name, want)?;
        }
        let names: Vec<(String, usize)> =
            net.stats_slots().iter().map(|(n, s)| (n.clone(), s.mean.len())).collect();
        let mut loaded = Vec::new();
        for (name, c) in &names {
            let want = Shape4::new(1, *c, 1, 1);
            let mean = read(&format!("{name}.running_mean"), want)?;
            let var = read(&format!("{name}.running_var"), want)?;
            loaded.push((mean.data().to_vec(), var.data().to_vec()));
        }
        drop(read);
        for ((_, slot), (mean, var)) in net.stats_slots_mut().into_iter().zip(loaded) {
            slot.mean = mean;
            slot.var = var;
        }
        if used != manifest.tensors.len() {
            return Err(NetError::Checkpoint(format!(
                "manifest lists {} tensors but the network uses {used}",
                manifest.tensors.len()
            )));
        }
        Ok(net)
    }
}

const CHECKPOINT_FORMAT: &str = "sbnet-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    seed: u64,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: [usize; 4],
}
