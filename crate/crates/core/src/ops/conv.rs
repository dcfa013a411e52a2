//! Offset-strided convolution and its adjoint.
//!
//! The convolution reads the zero-padded input at every dense position
//! congruent to `offset` modulo `stride` and packs the results into a
//! compact map; the deconvolution is defined as the exact adjoint, taking a
//! compact map back to the dense grid by scatter-add. Both are lowered to
//! one GEMM per image over an im2col buffer; a naive `_ref` twin of each op
//! exists for cross-checking values and for counting multiply-accumulates.

use std::cell::RefCell;

use super::{ConvKernel, ConvSpec, OpError};
use crate::tensor::{Shape4, Tensor4};

/// Output extent law: positions `offset + i * stride` that land inside the
/// dense grid, i.e. `ceil((len - offset) / stride)` of them per axis.
pub fn out_hw(spec: ConvSpec, h: usize, w: usize) -> Result<(usize, usize), OpError> {
    let (a, b) = spec.offset;
    if h <= a || w <= b {
        return Err(OpError::InputTooSmall { h, w, a, b });
    }
    Ok(((h - a).div_ceil(spec.stride), (w - b).div_ceil(spec.stride)))
}

thread_local! {
    static COL_BUF: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static AUX_BUF: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

fn with_buf<R>(
    cell: &'static std::thread::LocalKey<RefCell<Vec<f64>>>,
    len: usize,
    f: impl FnOnce(&mut [f64]) -> R,
) -> R {
    cell.with(|b| {
        let mut b = b.borrow_mut();
        if b.len() < len {
            b.resize(len, 0.0);
        }
        f(&mut b[..len])
    })
}

/// Gather one image into a (ci * k * k) x (oh * ow) matrix, row-major.
/// Row order is (channel, dy, dx), matching the kernel's weight layout.
/// Every cell is written, out-of-bounds taps as zero.
fn im2col(x: &[f64], ci: usize, h: usize, w: usize, spec: ConvSpec, oh: usize, ow: usize, col: &mut [f64]) {
    let s = spec.ksize;
    let p = spec.pad() as isize;
    let (a, b) = spec.offset;
    let stride = spec.stride;
    let cols = oh * ow;
    debug_assert_eq!(col.len(), ci * s * s * cols);
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for di in 0..s {
            for dj in 0..s {
                let row = (c * s + di) * s + dj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for i in 0..oh {
                    let y = (a + i * stride + di) as isize - p;
                    let dst = &mut dst_row[i * ow..(i + 1) * ow];
                    if y < 0 || y >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    let x0 = (b + dj) as isize - p;
                    if stride == 1 {
                        // Contiguous span with zero fringes where the window
                        // hangs over the border.
                        let j0 = (-x0).max(0) as usize;
                        let j1 = ((w as isize - x0).max(0) as usize).min(ow);
                        dst[..j0.min(ow)].fill(0.0);
                        if j0 < j1 {
                            let s0 = (x0 + j0 as isize) as usize;
                            dst[j0..j1].copy_from_slice(&src[s0..s0 + (j1 - j0)]);
                        }
                        dst[j1..].fill(0.0);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            let xx = x0 + (j * stride) as isize;
                            *d = if xx >= 0 && xx < w as isize { src[xx as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add the matrix back onto one image plane set.
fn col2im(col: &[f64], ci: usize, h: usize, w: usize, spec: ConvSpec, oh: usize, ow: usize, out: &mut [f64]) {
    let s = spec.ksize;
    let p = spec.pad() as isize;
    let (a, b) = spec.offset;
    let stride = spec.stride;
    let cols = oh * ow;
    debug_assert_eq!(col.len(), ci * s * s * cols);
    for c in 0..ci {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for di in 0..s {
            for dj in 0..s {
                let row = (c * s + di) * s + dj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for i in 0..oh {
                    let y = (a + i * stride + di) as isize - p;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                    let src = &src_row[i * ow..(i + 1) * ow];
                    let x0 = (b + dj) as isize - p;
                    if stride == 1 {
                        let j0 = (-x0).max(0) as usize;
                        let j1 = ((w as isize - x0).max(0) as usize).min(ow);
                        for j in j0..j1 {
                            dst[(x0 + j as isize) as usize] += src[j];
                        }
                    } else {
                        for (j, v) in src.iter().enumerate() {
                            let xx = x0 + (j * stride) as isize;
                            if xx >= 0 && xx < w as isize {
                                dst[xx as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// C (m x n, row-major) = alpha * A * B + beta * C, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m.saturating_sub(1) * rsa + k.saturating_sub(1) * csa < a.len() || k == 0);
    debug_assert!(k.saturating_sub(1) * rsb + n.saturating_sub(1) * csb < b.len() || k == 0);
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_conv_args(x: &Tensor4, k: &ConvKernel, spec: ConvSpec) -> Result<(usize, usize), OpError> {
    let xs = x.shape();
    let ks = k.weights.shape();
    if ks.c != xs.c || ks.h != spec.ksize {
        return Err(OpError::KernelMismatch { kernel: ks, input: xs });
    }
    out_hw(spec, xs.h, xs.w)
}

/// Offset-strided convolution: x (n, ci, h, w) -> (n, co, oh, ow).
pub fn conv2d_forward(x: &Tensor4, k: &ConvKernel, spec: ConvSpec) -> Result<Tensor4, OpError> {
    let (oh, ow) = check_conv_args(x, k, spec)?;
    let xs = x.shape();
    let (ci, co, s) = (k.in_channels(), k.out_channels(), spec.ksize);
    let kdim = ci * s * s;
    let cols = oh * ow;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, co, oh, ow));
    let w = k.weights.data().to_vec();
    let odata = out.data_mut();
    with_buf(&COL_BUF, kdim * cols, |col| {
        for img in 0..xs.n {
            let xi = &x.data()[img * xs.c * xs.h * xs.w..(img + 1) * xs.c * xs.h * xs.w];
            let oi = &mut odata[img * co * cols..(img + 1) * co * cols];
            if s == 1 && spec.stride == 1 {
                gemm(co, kdim, cols, 1.0, &w, kdim, 1, xi, cols, 1, 0.0, oi);
            } else {
                im2col(xi, ci, xs.h, xs.w, spec, oh, ow, col);
                gemm(co, kdim, cols, 1.0, &w, kdim, 1, col, cols, 1, 0.0, oi);
            }
        }
    });
    Ok(out)
}

/// Backward state for `conv2d_vjp`.
pub struct ConvBack {
    x: Tensor4,
    k: ConvKernel,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
}

impl ConvBack {
    /// Returns (d_input, d_weights) for the given output cotangent.
    pub fn pull(&self, dout: &Tensor4) -> (Tensor4, Tensor4) {
        let xs = self.x.shape();
        let (ci, co, s) = (self.k.in_channels(), self.k.out_channels(), self.spec.ksize);
        let kdim = ci * s * s;
        let cols = self.oh * self.ow;
        assert_eq!(dout.shape(), Shape4::new(xs.n, co, self.oh, self.ow), "cotangent shape");
        let w = self.k.weights.data().to_vec();
        let mut dx = Tensor4::zeros(xs);
        let mut dw = Tensor4::zeros(self.k.weights.shape());
        let dxd = dx.data_mut();
        let plain = s == 1 && self.spec.stride == 1;
        with_buf(&COL_BUF, kdim * cols, |col| {
            with_buf(&AUX_BUF, kdim * cols, |g| {
                for img in 0..xs.n {
                    let span = xs.c * xs.h * xs.w;
                    let xi = &self.x.data()[img * span..(img + 1) * span];
                    let doi = &dout.data()[img * co * cols..(img + 1) * co * cols];
                    // dW += dY . col(x)^T, accumulated in image order.
                    let b = if plain { xi } else { im2col(xi, ci, xs.h, xs.w, self.spec, self.oh, self.ow, col); &*col };
                    gemm(co, cols, kdim, 1.0, doi, cols, 1, b, 1, cols, 1.0, dw.data_mut());
                    // dX = col2im(W^T . dY)
                    gemm(kdim, co, cols, 1.0, &w, 1, kdim, doi, cols, 1, 0.0, g);
                    if plain {
                        dxd[img * span..(img + 1) * span].copy_from_slice(g);
                    } else {
                        col2im(g, ci, xs.h, xs.w, self.spec, self.oh, self.ow, &mut dxd[img * span..(img + 1) * span]);
                    }
                }
            })
        });
        (dx, dw)
    }
}

pub fn conv2d_vjp(x: &Tensor4, k: &ConvKernel, spec: ConvSpec) -> Result<(Tensor4, ConvBack), OpError> {
    let out = conv2d_forward(x, k, spec)?;
    let (oh, ow) = (out.shape().h, out.shape().w);
    Ok((out, ConvBack { x: x.clone(), k: k.clone(), spec, oh, ow }))
}

fn check_deconv_args(
    y: &Tensor4,
    k: &ConvKernel,
    spec: ConvSpec,
    hw: (usize, usize),
) -> Result<(usize, usize), OpError> {
    let ys = y.shape();
    let ks = k.weights.shape();
    let (oh, ow) = out_hw(spec, hw.0, hw.1)?;
    if ks.n != ys.c || ks.h != spec.ksize || (oh, ow) != (ys.h, ys.w) {
        return Err(OpError::KernelMismatch { kernel: ks, input: ys });
    }
    Ok((oh, ow))
}

/// Adjoint of `conv2d_forward` with the same kernel: scatters a compact map
/// y (n, co, oh, ow) back onto the dense grid, giving (n, ci, h, w) where
/// `hw` must satisfy the output extent law for y's spatial dims.
pub fn deconv2d_forward(
    y: &Tensor4,
    k: &ConvKernel,
    spec: ConvSpec,
    hw: (usize, usize),
) -> Result<Tensor4, OpError> {
    let (oh, ow) = check_deconv_args(y, k, spec, hw)?;
    let ys = y.shape();
    let (ci, co, s) = (k.in_channels(), k.out_channels(), spec.ksize);
    let kdim = ci * s * s;
    let cols = oh * ow;
    let plain = s == 1 && spec.stride == 1;
    let mut z = Tensor4::zeros(Shape4::new(ys.n, ci, hw.0, hw.1));
    let w = k.weights.data().to_vec();
    let zd = z.data_mut();
    with_buf(&AUX_BUF, kdim * cols, |g| {
        for img in 0..ys.n {
            let yi = &y.data()[img * co * cols..(img + 1) * co * cols];
            let span = ci * hw.0 * hw.1;
            let zi = &mut zd[img * span..(img + 1) * span];
            gemm(kdim, co, cols, 1.0, &w, 1, kdim, yi, cols, 1, 0.0, g);
            if plain {
                zi.copy_from_slice(g);
            } else {
                col2im(g, ci, hw.0, hw.1, spec, oh, ow, zi);
            }
        }
    });
    Ok(z)
}

/// Backward state for `deconv2d_vjp`.
pub struct DeconvBack {
    y: Tensor4,
    k: ConvKernel,
    spec: ConvSpec,
    hw: (usize, usize),
}

impl DeconvBack {
    /// Returns (d_y, d_weights) for the given dense-grid cotangent.
    pub fn pull(&self, dz: &Tensor4) -> (Tensor4, Tensor4) {
        let ys = self.y.shape();
        let (ci, co, s) = (self.k.in_channels(), self.k.out_channels(), self.spec.ksize);
        assert_eq!(dz.shape(), Shape4::new(ys.n, ci, self.hw.0, self.hw.1), "cotangent shape");
        // d_y is the forward convolution of dz; d_w pairs y against col(dz).
        let dy = conv2d_forward(dz, &self.k, self.spec).expect("shapes checked at construction");
        let kdim = ci * s * s;
        let cols = ys.h * ys.w;
        let plain = s == 1 && self.spec.stride == 1;
        let mut dw = Tensor4::zeros(self.k.weights.shape());
        with_buf(&COL_BUF, kdim * cols, |col| {
            for img in 0..ys.n {
                let span = ci * self.hw.0 * self.hw.1;
                let dzi = &dz.data()[img * span..(img + 1) * span];
                let yi = &self.y.data()[img * co * cols..(img + 1) * co * cols];
                let b = if plain {
                    dzi
                } else {
                    im2col(dzi, ci, self.hw.0, self.hw.1, self.spec, ys.h, ys.w, col);
                    &*col
                };
                gemm(co, cols, kdim, 1.0, yi, cols, 1, b, 1, cols, 1.0, dw.data_mut());
            }
        });
        (dy, dw)
    }
}

pub fn deconv2d_vjp(
    y: &Tensor4,
    k: &ConvKernel,
    spec: ConvSpec,
    hw: (usize, usize),
) -> Result<(Tensor4, DeconvBack), OpError> {
    let z = deconv2d_forward(y, k, spec, hw)?;
    Ok((z, DeconvBack { y: y.clone(), k: k.clone(), spec, hw }))
}

/// Naive convolution. Numerically identical work order is not guaranteed,
/// but values agree with the GEMM path to rounding. `macs` counts one per
/// kernel tap visited, including taps that land in the zero padding, which
/// is the convention the cost model uses.
pub fn conv2d_ref(x: &Tensor4, k: &ConvKernel, spec: ConvSpec, macs: &mut u64) -> Result<Tensor4, OpError> {
    let (oh, ow) = check_conv_args(x, k, spec)?;
    let xs = x.shape();
    let (ci, co, s) = (k.in_channels(), k.out_channels(), spec.ksize);
    let p = spec.pad() as isize;
    let (a, b) = spec.offset;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, co, oh, ow));
    let od = out.data_mut();
    for img in 0..xs.n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for di in 0..s {
                            for dj in 0..s {
                                let y = (a + i * spec.stride + di) as isize - p;
                                let xx = (b + j * spec.stride + dj) as isize - p;
                                *macs += 1;
                                let v = if y >= 0 && y < xs.h as isize && xx >= 0 && xx < xs.w as isize {
                                    x.at(img, c, y as usize, xx as usize)
                                } else {
                                    0.0
                                };
                                acc += k.weights.at(o, c, di, dj) * v;
                            }
                        }
                    }
                    od[((img * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Naive adjoint. Counts exactly as many multiply-accumulates as the
/// convolution it transposes; scatters that land in padding are dropped.
pub fn deconv2d_ref(
    y: &Tensor4,
    k: &ConvKernel,
    spec: ConvSpec,
    hw: (usize, usize),
    macs: &mut u64,
) -> Result<Tensor4, OpError> {
    let (oh, ow) = check_deconv_args(y, k, spec, hw)?;
    let ys = y.shape();
    let (ci, co, s) = (k.in_channels(), k.out_channels(), spec.ksize);
    let p = spec.pad() as isize;
    let (a, b) = spec.offset;
    let mut z = Tensor4::zeros(Shape4::new(ys.n, ci, hw.0, hw.1));
    let zd = z.data_mut();
    for img in 0..ys.n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let v = y.at(img, o, i, j);
                    for c in 0..ci {
                        for di in 0..s {
                            for dj in 0..s {
                                let yy = (a + i * spec.stride + di) as isize - p;
                                let xx = (b + j * spec.stride + dj) as isize - p;
                                *macs += 1;
                                if yy >= 0 && yy < hw.0 as isize && xx >= 0 && xx < hw.1 as isize {
                                    zd[((img * ci + c) * hw.0 + yy as usize) * hw.1 + xx as usize] +=
                                        k.weights.at(o, c, di, dj) * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(z)
}
