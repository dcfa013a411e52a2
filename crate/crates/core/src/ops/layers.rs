//! Pointwise, normalization, pooling, and classifier-head operations.

use super::OpError;
use crate::tensor::{Shape4, Tensor4};

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Forward plus a pullback closure. Gradient at exactly zero is zero.
pub fn relu_vjp(x: &Tensor4) -> (Tensor4, impl Fn(&Tensor4) -> Tensor4) {
    let y = relu(x);
    let xc = x.clone();
    let back = move |dy: &Tensor4| {
        xc.zip_map(dy, |xi, d| if xi > 0.0 { d } else { 0.0 }).expect("relu cotangent shape")
    };
    (y, back)
}

/// Per-channel running statistics owned by a batch-norm layer.
/// Updated with the biased batch variance under a (1 - m) / m blend.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: 0.1, eps: 1e-5 }
    }
}

/// What `bn_backward` needs from the forward pass.
pub struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

fn check_bn_args(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4) -> Result<usize, OpError> {
    let c = x.shape().c;
    let want = Shape4::new(1, c, 1, 1);
    for t in [gamma, beta] {
        if t.shape() != want {
            return Err(OpError::ShapeMismatch { expected: want, got: t.shape() });
        }
    }
    Ok(c)
}

/// Batch normalization over (n, h, w) per channel, training mode: uses batch
/// statistics, updates `stats` in place with the biased variance.
pub fn batchnorm_train(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    stats: &mut RunningStats,
) -> Result<(Tensor4, BnCache), OpError> {
    let c = check_bn_args(x, gamma, beta)?;
    let s = x.shape();
    let m = (s.n * s.h * s.w) as f64;
    let plane = s.h * s.w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let xd = x.data();
    for img in 0..s.n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let mut acc = 0.0;
            for v in &xd[base..base + plane] {
                acc += v;
            }
            mean[ch] += acc;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for img in 0..s.n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let mu = mean[ch];
            let mut acc = 0.0;
            for v in &xd[base..base + plane] {
                let d = v - mu;
                acc += d * d;
            }
            var[ch] += acc;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let mom = stats.momentum;
    for ch in 0..c {
        stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mean[ch];
        stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * var[ch];
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
    let mut xhat = Tensor4::zeros(s);
    let mut y = Tensor4::zeros(s);
    let (gd, bd) = (gamma.data().to_vec(), beta.data().to_vec());
    {
        let xh = xhat.data_mut();
        let yd = y.data_mut();
        for img in 0..s.n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + plane {
                    let h = (xd[i] - mu) * is;
                    xh[i] = h;
                    yd[i] = g * h + b;
                }
            }
        }
    }
    Ok((y, BnCache { xhat, inv_std, gamma: gd }))
}

/// Batch normalization, inference mode: uses the stored running statistics.
pub fn batchnorm_eval(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    stats: &RunningStats,
) -> Result<Tensor4, OpError> {
    let c = check_bn_args(x, gamma, beta)?;
    let s = x.shape();
    let plane = s.h * s.w;
    let mut y = Tensor4::zeros(s);
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let yd = y.data_mut();
    for img in 0..s.n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let is = 1.0 / (stats.var[ch] + stats.eps).sqrt();
            let (mu, g, b) = (stats.mean[ch], gd[ch], bd[ch]);
            for i in base..base + plane {
                yd[i] = g * (xd[i] - mu) * is + b;
            }
        }
    }
    Ok(y)
}

/// Returns (dx, dgamma, dbeta) for a training-mode forward.
pub fn bn_backward(cache: &BnCache, dy: &Tensor4) -> (Tensor4, Tensor4, Tensor4) {
    let s = cache.xhat.shape();
    let c = s.c;
    let plane = s.h * s.w;
    let m = (s.n * s.h * s.w) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let (xh, dyd) = (cache.xhat.data(), dy.data());
    assert_eq!(dy.shape(), s, "cotangent shape");
    for img in 0..s.n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let (mut dg, mut db) = (0.0, 0.0);
            for i in base..base + plane {
                dg += dyd[i] * xh[i];
                db += dyd[i];
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
    }
    let mut dx = Tensor4::zeros(s);
    let dxd = dx.data_mut();
    for img in 0..s.n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let scale = cache.gamma[ch] * cache.inv_std[ch];
            let (dg, db) = (dgamma[ch], dbeta[ch]);
            for i in base..base + plane {
                dxd[i] = scale * (dyd[i] - db / m - xh[i] * dg / m);
            }
        }
    }
    let shp = Shape4::new(1, c, 1, 1);
    (
        dx,
        Tensor4::from_vec(shp, dgamma).expect("dgamma"),
        Tensor4::from_vec(shp, dbeta).expect("dbeta"),
    )
}

/// Average pool with square window `k`, stride `k`, anchored at `offset` on
/// the unpadded grid. Windows clipped by the border average only the cells
/// they actually cover.
pub fn avgpool_offset(x: &Tensor4, k: usize, offset: (usize, usize)) -> Result<Tensor4, OpError> {
    let s = x.shape();
    let (a, b) = offset;
    if a >= k || b >= k {
        return Err(OpError::BadOffset(a, b, k));
    }
    if s.h <= a || s.w <= b {
        return Err(OpError::InputTooSmall { h: s.h, w: s.w, a, b });
    }
    let oh = (s.h - a).div_ceil(k);
    let ow = (s.w - b).div_ceil(k);
    let mut y = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    let yd = y.data_mut();
    for img in 0..s.n {
        for ch in 0..s.c {
            for i in 0..oh {
                let y0 = a + i * k;
                let y1 = (y0 + k).min(s.h);
                for j in 0..ow {
                    let x0 = b + j * k;
                    let x1 = (x0 + k).min(s.w);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += x.at(img, ch, yy, xx);
                        }
                    }
                    yd[((img * s.c + ch) * oh + i) * ow + j] =
                        acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    Ok(y)
}

pub fn avgpool_offset_vjp(
    x: &Tensor4,
    k: usize,
    offset: (usize, usize),
) -> Result<(Tensor4, impl Fn(&Tensor4) -> Tensor4), OpError> {
    let y = avgpool_offset(x, k, offset)?;
    let s = x.shape();
    let (a, b) = offset;
    let back = move |dy: &Tensor4| {
        let os = dy.shape();
        let mut dx = Tensor4::zeros(s);
        let dxd = dx.data_mut();
        for img in 0..s.n {
            for ch in 0..s.c {
                for i in 0..os.h {
                    let y0 = a + i * k;
                    let y1 = (y0 + k).min(s.h);
                    for j in 0..os.w {
                        let x0 = b + j * k;
                        let x1 = (x0 + k).min(s.w);
                        let g = dy.at(img, ch, i, j) / ((y1 - y0) * (x1 - x0)) as f64;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                dxd[((img * s.c + ch) * s.h + yy) * s.w + xx] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    };
    Ok((y, back))
}

/// Keep every `stride`-th pixel starting at (0, 0). Used by parameter-free
/// downsampling shortcuts.
pub fn subsample(x: &Tensor4, stride: usize) -> Tensor4 {
    let s = x.shape();
    let oh = s.h.div_ceil(stride);
    let ow = s.w.div_ceil(stride);
    let mut y = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    let yd = y.data_mut();
    for img in 0..s.n {
        for ch in 0..s.c {
            for i in 0..oh {
                for j in 0..ow {
                    yd[((img * s.c + ch) * oh + i) * ow + j] = x.at(img, ch, i * stride, j * stride);
                }
            }
        }
    }
    y
}

pub fn subsample_vjp(x: &Tensor4, stride: usize) -> (Tensor4, impl Fn(&Tensor4) -> Tensor4) {
    let y = subsample(x, stride);
    let s = x.shape();
    let back = move |dy: &Tensor4| {
        let os = dy.shape();
        let mut dx = Tensor4::zeros(s);
        let dxd = dx.data_mut();
        for img in 0..s.n {
            for ch in 0..s.c {
                for i in 0..os.h {
                    for j in 0..os.w {
                        dxd[((img * s.c + ch) * s.h + i * stride) * s.w + j * stride] =
                            dy.at(img, ch, i, j);
                    }
                }
            }
        }
        dx
    };
    (y, back)
}

/// 3x3 max pool, stride 2, pad 1 (the classic stem pool). Padding cells
/// never win: the max runs over real cells only.
pub fn maxpool(x: &Tensor4) -> (Tensor4, Vec<usize>) {
    let s = x.shape();
    let oh = s.h.div_ceil(2);
    let ow = s.w.div_ceil(2);
    let mut y = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    let mut arg = vec![0usize; s.n * s.c * oh * ow];
    let yd = y.data_mut();
    for img in 0..s.n {
        for ch in 0..s.c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_ix = 0;
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let yy = (2 * i + di) as isize - 1;
                            let xx = (2 * j + dj) as isize - 1;
                            if yy < 0 || yy >= s.h as isize || xx < 0 || xx >= s.w as isize {
                                continue;
                            }
                            let v = x.at(img, ch, yy as usize, xx as usize);
                            if v > best {
                                best = v;
                                best_ix = ((img * s.c + ch) * s.h + yy as usize) * s.w + xx as usize;
                            }
                        }
                    }
                    let o = ((img * s.c + ch) * oh + i) * ow + j;
                    yd[o] = best;
                    arg[o] = best_ix;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_vjp(x: &Tensor4) -> (Tensor4, impl Fn(&Tensor4) -> Tensor4) {
    let (y, arg) = maxpool(x);
    let s = x.shape();
    let back = move |dy: &Tensor4| {
        let mut dx = Tensor4::zeros(s);
        let dxd = dx.data_mut();
        for (o, &src) in arg.iter().enumerate() {
            dxd[src] += dy.data()[o];
        }
        dx
    };
    (y, back)
}

/// Spatial mean per channel: (n, c, h, w) -> (n, c, 1, 1).
pub fn global_avgpool(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut y = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
    let yd = y.data_mut();
    let xd = x.data();
    for i in 0..s.n * s.c {
        let mut acc = 0.0;
        for v in &xd[i * plane..(i + 1) * plane] {
            acc += v;
        }
        yd[i] = acc / plane as f64;
    }
    y
}

pub fn global_avgpool_vjp(x: &Tensor4) -> (Tensor4, impl Fn(&Tensor4) -> Tensor4) {
    let y = global_avgpool(x);
    let s = x.shape();
    let back = move |dy: &Tensor4| {
        let plane = (s.h * s.w) as f64;
        let mut dx = Tensor4::zeros(s);
        let dxd = dx.data_mut();
        for i in 0..s.n * s.c {
            let g = dy.data()[i] / plane;
            for v in &mut dxd[i * s.h * s.w..(i + 1) * s.h * s.w] {
                *v = g;
            }
        }
        dx
    };
    (y, back)
}

fn check_linear_args(x: &Tensor4, w: &Tensor4) -> Result<(usize, usize), OpError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.h != 1 || xs.w != 1 || ws.h != 1 || ws.w != 1 || ws.c != xs.c {
        return Err(OpError::KernelMismatch { kernel: ws, input: xs });
    }
    Ok((xs.c, ws.n))
}

/// Fully connected map with no bias: x (n, d_in, 1, 1), w (d_out, d_in, 1, 1).
pub fn linear(x: &Tensor4, w: &Tensor4) -> Result<Tensor4, OpError> {
    let (din, dout) = check_linear_args(x, w)?;
    let n = x.shape().n;
    let mut y = Tensor4::zeros(Shape4::new(n, dout, 1, 1));
    let (xd, wd, yd) = (x.data(), w.data(), y.data_mut());
    for img in 0..n {
        for o in 0..dout {
            let mut acc = 0.0;
            for i in 0..din {
                acc += wd[o * din + i] * xd[img * din + i];
            }
            yd[img * dout + o] = acc;
        }
    }
    Ok(y)
}

/// Counting twin of `linear`: one multiply-accumulate per weight use.
pub fn linear_ref(x: &Tensor4, w: &Tensor4, macs: &mut u64) -> Result<Tensor4, OpError> {
    let (din, dout) = check_linear_args(x, w)?;
    *macs += (x.shape().n * din * dout) as u64;
    linear(x, w)
}

#[allow(clippy::type_complexity)]
pub fn linear_vjp(
    x: &Tensor4,
    w: &Tensor4,
) -> Result<(Tensor4, impl Fn(&Tensor4) -> (Tensor4, Tensor4)), OpError> {
    let y = linear(x, w)?;
    let (xc, wc) = (x.clone(), w.clone());
    let back = move |dy: &Tensor4| {
        let (din, dout) = (xc.shape().c, wc.shape().n);
        let n = xc.shape().n;
        assert_eq!(dy.shape(), Shape4::new(n, dout, 1, 1), "cotangent shape");
        let mut dx = Tensor4::zeros(xc.shape());
        let mut dw = Tensor4::zeros(wc.shape());
        let (xd, wd, dyd) = (xc.data(), wc.data(), dy.data());
        {
            let dxd = dx.data_mut();
            for img in 0..n {
                for o in 0..dout {
                    let g = dyd[img * dout + o];
                    for i in 0..din {
                        dxd[img * din + i] += g * wd[o * din + i];
                    }
                }
            }
        }
        {
            let dwd = dw.data_mut();
            for img in 0..n {
                for o in 0..dout {
                    let g = dyd[img * dout + o];
                    for i in 0..din {
                        dwd[o * din + i] += g * xd[img * din + i];
                    }
                }
            }
        }
        (dx, dw)
    };
    Ok((y, back))
}

/// Mean cross-entropy of softmax(logits) against integer labels.
/// Returns (loss, dlogits); dlogits is already divided by the batch size.
pub fn softmax_xent(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4), OpError> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || labels.len() != s.n {
        return Err(OpError::ShapeMismatch { expected: Shape4::new(labels.len(), s.c, 1, 1), got: s });
    }
    let classes = s.c;
    let mut dl = Tensor4::zeros(s);
    let ld = logits.data();
    let dld = dl.data_mut();
    let mut loss = 0.0;
    for img in 0..s.n {
        let lab = labels[img];
        if lab >= classes {
            return Err(OpError::LabelOutOfRange(lab, classes));
        }
        let row = &ld[img * classes..(img + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row {
            z += (v - mx).exp();
        }
        let logz = z.ln() + mx;
        loss += logz - row[lab];
        for k in 0..classes {
            let p = (row[k] - logz).exp();
            dld[img * classes + k] = (p - if k == lab { 1.0 } else { 0.0 }) / s.n as f64;
        }
    }
    Ok((loss / s.n as f64, dl))
}
