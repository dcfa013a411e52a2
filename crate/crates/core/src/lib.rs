//! Building blocks for spatial-bottleneck residual networks.
//!
//! The central operator pair is an offset-strided convolution (a 3x3 or 1x1
//! convolution evaluated only at positions congruent to an offset modulo a
//! stride K) and its adjoint deconvolution, which scatters a compact map back
//! to full resolution. Summing conv+deconv branches over a set of offsets
//! yields the spatial bottleneck module. On top of that sit residual block
//! and network builders, an analytic MAC/parameter counter, a receptive-field
//! prober, dataset plumbing, SGD training, and a wall-clock benchmark runner.
//!
//! Everything computes in f64 with NCHW row-major layout, and every seeded
//! code path is deterministic: same seed, same bytes out.

pub mod analysis;
pub mod battery;
pub mod bench;
pub mod checks;
pub mod data;
pub mod net;
pub mod ops;
pub mod rng;
pub mod sb;
pub mod tensor;
pub mod train;
