//! Differentiable array operations.
//!
//! Every op comes in two flavors: a plain forward, and a `_vjp` variant that
//! also returns what the backward pass needs. `GradPair` packages an output
//! with its pullback closure for code that wants to compose ops generically
//! (the gradient checker does); the network code calls the explicit `_vjp`
//! functions instead and manages caches itself.

mod conv;
mod gradcheck;
mod layers;

pub use conv::{
    conv2d_forward, conv2d_ref, conv2d_vjp, deconv2d_forward, deconv2d_ref, deconv2d_vjp,
    out_hw, ConvBack, DeconvBack,
};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layers::{
    avgpool_offset, avgpool_offset_vjp, batchnorm_eval, batchnorm_train, bn_backward,
    global_avgpool, global_avgpool_vjp, linear, linear_ref, linear_vjp, maxpool, maxpool_vjp,
    relu, relu_vjp, softmax_xent, subsample, subsample_vjp, BnCache, RunningStats,
};

use crate::tensor::{Shape4, Tensor4, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum OpError {
    #[error("offset ({0}, {1}) must be smaller than stride {2}")]
    BadOffset(usize, usize, usize),
    #[error("kernel size {0} not supported, expected 1 or 3")]
    BadKernelSize(usize),
    #[error("stride must be at least 1")]
    BadStride,
    #[error("input {h}x{w} has no sample positions for offset ({a}, {b})")]
    InputTooSmall { h: usize, w: usize, a: usize, b: usize },
    #[error("kernel {kernel} does not apply to input {input}")]
    KernelMismatch { kernel: Shape4, input: Shape4 },
    #[error("tensor {got} where {expected} was required")]
    ShapeMismatch { expected: Shape4, got: Shape4 },
    #[error("labels run to {0} but there are only {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("unknown sampling pattern '{0}'")]
    UnknownPattern(String),
    #[error("bad sampling pattern: {0}")]
    BadPattern(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where a convolution reads: positions congruent to `offset` modulo
/// `stride` on the zero-padded dense grid. `stride == 1, offset == (0, 0)`
/// is an ordinary dense convolution. Padding is always `ksize / 2`, so the
/// dense grid matches the input grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub offset: (usize, usize),
    pub ksize: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, offset: (usize, usize), ksize: usize) -> Result<Self, OpError> {
        if stride == 0 {
            return Err(OpError::BadStride);
        }
        if offset.0 >= stride || offset.1 >= stride {
            return Err(OpError::BadOffset(offset.0, offset.1, stride));
        }
        if ksize != 1 && ksize != 3 {
            return Err(OpError::BadKernelSize(ksize));
        }
        Ok(ConvSpec { stride, offset, ksize })
    }

    pub fn dense(ksize: usize) -> Self {
        ConvSpec::new(1, (0, 0), ksize).expect("dense spec")
    }

    pub fn pad(&self) -> usize {
        self.ksize / 2
    }
}

/// Convolution weights, laid out (out_channels, in_channels, k, k).
///
/// A deconvolution reuses the same type with the roles flipped: it maps
/// `out_channels` maps back to `in_channels` maps, exactly the adjoint of
/// the convolution the kernel describes.
#[derive(Clone, Debug)]
pub struct ConvKernel {
    pub weights: Tensor4,
}

impl ConvKernel {
    pub fn new(weights: Tensor4) -> Result<Self, OpError> {
        let s = weights.shape();
        if s.h != s.w || (s.h != 1 && s.h != 3) {
            return Err(OpError::BadKernelSize(s.h));
        }
        Ok(ConvKernel { weights })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn ksize(&self) -> usize {
        self.weights.shape().h
    }
}

pub struct PullOut {
    pub d_inputs: Vec<Tensor4>,
    pub d_params: Vec<Tensor4>,
}

/// A value plus the pullback of the computation that produced it.
pub struct GradPair {
    pub value: Tensor4,
    pullback: Box<dyn Fn(&Tensor4) -> PullOut>,
}

impl GradPair {
    pub fn new(value: Tensor4, pullback: impl Fn(&Tensor4) -> PullOut + 'static) -> Self {
        GradPair { value, pullback: Box::new(pullback) }
    }

    pub fn pull(&self, cotangent: &Tensor4) -> PullOut {
        (self.pullback)(cotangent)
    }
}

/// GradPair constructors for the ops the generic tests compose.
pub mod gp {
    use super::*;

    pub fn conv2d(x: &Tensor4, k: &ConvKernel, spec: ConvSpec) -> Result<GradPair, OpError> {
        let (value, back) = conv2d_vjp(x, k, spec)?;
        Ok(GradPair::new(value, move |cot| {
            let (dx, dw) = back.pull(cot);
            PullOut { d_inputs: vec![dx], d_params: vec![dw] }
        }))
    }

    pub fn deconv2d(
        y: &Tensor4,
        k: &ConvKernel,
        spec: ConvSpec,
        out_hw: (usize, usize),
    ) -> Result<GradPair, OpError> {
        let (value, back) = deconv2d_vjp(y, k, spec, out_hw)?;
        Ok(GradPair::new(value, move |cot| {
            let (dy, dw) = back.pull(cot);
            PullOut { d_inputs: vec![dy], d_params: vec![dw] }
        }))
    }

    pub fn relu(x: &Tensor4) -> GradPair {
        let (value, back) = relu_vjp(x);
        GradPair::new(value, move |cot| PullOut { d_inputs: vec![back(cot)], d_params: vec![] })
    }

    pub fn linear(x: &Tensor4, w: &Tensor4) -> Result<GradPair, OpError> {
        let (value, back) = linear_vjp(x, w)?;
        Ok(GradPair::new(value, move |cot| {
            let (dx, dw) = back(cot);
            PullOut { d_inputs: vec![dx], d_params: vec![dw] }
        }))
    }
}
