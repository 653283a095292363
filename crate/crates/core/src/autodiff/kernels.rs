//! Forward and backward kernels shared by the recording graph and the
//! eager evaluator. Both paths call these functions, so their values are
//! bit-identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, msg: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        msg: msg.into(),
    }
}

/// Channel layout of a `[N, C, ...]` tensor: (channels, inner size).
fn channel_layout(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    if x.ndim() < 2 {
        return Err(invalid(op, x, "expected at least [N, C]"));
    }
    Ok((x.shape()[1], x.shape()[2..].iter().product()))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = ad[i * k + p];
            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
    (
        Tensor::new(vec![m, k], da).unwrap(),
        Tensor::new(vec![k, n], db).unwrap(),
    )
}

/// True when `b` is a per-channel bias for `a` (length equal to axis 1).
pub fn is_bias_add(a: &Tensor, b: &Tensor) -> bool {
    a.ndim() >= 2 && b.ndim() == 1 && b.shape()[0] == a.shape()[1]
}

/// Elementwise sum of equal shapes, or a per-channel bias add when `b` is
/// one-dimensional with length `a.shape[1]`.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.same_shape(b) {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if !is_bias_add(a, b) {
        return Err(mismatch("add", a, b));
    }
    let (c, inner) = channel_layout("add", a)?;
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + bd[(i / inner) % c])
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Gradient of a per-channel bias: sum over every axis but 1.
pub fn bias_grad(a_shape: &[usize], g: &Tensor) -> Tensor {
    let c = a_shape[1];
    let inner: usize = a_shape[2..].iter().product();
    let mut out = vec![0.0; c];
    for (i, gv) in g.data().iter().enumerate() {
        out[(i / inner) % c] += gv;
    }
    Tensor::vector(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(mismatch("mul", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at exactly zero is 0.
pub fn relu_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn new(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        if x.ndim() != 4 || k.ndim() != 4 || x.shape()[1] != k.shape()[1] {
            return Err(mismatch("conv2d", x, k));
        }
        if stride == 0 {
            return Err(invalid("conv2d", x, "stride must be positive"));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch("conv2d", x, k));
        }
        Ok(Conv2dGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Input coordinate for an output position and kernel offset, if inside
    /// the unpadded input.
    #[inline]
    fn source(&self, out: usize, off: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + off).checked_sub(self.padding)?;
        (pos < limit).then_some(pos)
    }
}

/// Direct convolution. `x: [N, C, H, W]`, `k: [O, C, KH, KW]`.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Conv2dGeometry::new(x, k, stride, padding)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.o {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                                acc += xd[((n * g.c + c) * g.h + iy) * g.w + ix]
                                    * kd[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[((n * g.o + o) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
    grad: &Tensor,
) -> (Tensor, Tensor) {
    let g = Conv2dGeometry::new(x, k, stride, padding).expect("geometry checked in forward");
    let (xd, kd, gd) = (x.data(), k.data(), grad.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    for n in 0..g.n {
        for o in 0..g.o {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = gd[((n * g.o + o) * g.oh + oy) * g.ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..g.c {
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                                let xi = ((n * g.c + c) * g.h + iy) * g.w + ix;
                                let ki = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                                dx[xi] += gv * kd[ki];
                                dk[ki] += gv * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(k.shape().to_vec(), dk).unwrap(),
    )
}

/// Non-overlapping average pooling with a square window of side `k`.
/// Trailing rows/columns that do not fill a window are dropped.
pub fn avgpool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(invalid("avgpool2d", x, "expected [N, C, H, W]"));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if k == 0 || h < k || w < k {
        return Err(invalid("avgpool2d", x, format!("window {k} does not fit")));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += xd[(plane * h + oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[(plane * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avgpool2d_backward(x_shape: &[usize], k: usize, g: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let gd = g.data();
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gd[(plane * oh + oy) * ow + ox] * scale;
                for dy in 0..k {
                    for dx_ in 0..k {
                        dx[(plane * h + oy * k + dy) * w + ox * k + dx_] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).unwrap()
}

pub fn flatten(x: &Tensor) -> Result<Tensor> {
    if x.ndim() < 1 {
        return Err(invalid("flatten", x, "cannot flatten a scalar"));
    }
    let n = x.shape()[0];
    let rest = x.shape()[1..].iter().product();
    x.clone().reshape(vec![n, rest])
}

/// Mean softmax cross-entropy over the batch. Returns the scalar loss and
/// the row-wise softmax probabilities needed by the backward pass.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    if logits.ndim() != 2 {
        return Err(invalid("softmax_cross_entropy", logits, "expected [N, K] logits"));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p /= z;
        }
        total += z.ln() + max - row[label];
    }
    Ok((
        Tensor::scalar(total / n as f64),
        Tensor::new(vec![n, k], probs).unwrap(),
    ))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], g: f64) -> Tensor {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = g / n as f64;
    let mut d = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        d[i * k + label] -= 1.0;
    }
    for v in &mut d {
        *v *= scale;
    }
    Tensor::new(vec![n, k], d).unwrap()
}

/// Per-channel statistics of a batch-norm input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide by count) variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

/// Saved tensors of a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

fn check_bn_params(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize)> {
    let (c, inner) = channel_layout("batch_norm", x)?;
    if gamma.shape() != [c] {
        return Err(mismatch("batch_norm", x, gamma));
    }
    if beta.shape() != [c] {
        return Err(mismatch("batch_norm", x, beta));
    }
    Ok((c, inner))
}

pub fn batch_stats(x: &Tensor) -> Result<BatchStats> {
    let (c, inner) = channel_layout("batch_norm", x)?;
    let count = x.numel() / c;
    if count == 0 {
        return Err(invalid("batch_norm", x, "empty batch"));
    }
    let mut mean = vec![0.0; c];
    for (i, v) in x.data().iter().enumerate() {
        mean[(i / inner) % c] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for (i, v) in x.data().iter().enumerate() {
        let ch = (i / inner) % c;
        var[ch] += (v - mean[ch]).powi(2);
    }
    var.iter_mut().for_each(|s| *s /= count as f64);
    Ok(BatchStats { mean, var, count })
}

/// Train-mode batch norm using the batch's own statistics.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormSaved, BatchStats)> {
    let (c, inner) = check_bn_params(x, gamma, beta)?;
    let stats = batch_stats(x)?;
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    for (i, v) in x.data().iter().enumerate() {
        let ch = (i / inner) % c;
        xhat[i] = (v - stats.mean[ch]) * inv_std[ch];
        y[i] = gamma.data()[ch] * xhat[i] + beta.data()[ch];
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BatchNormSaved {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        },
        stats,
    ))
}

/// Returns (dx, dgamma, dbeta).
pub fn batch_norm_train_backward(
    saved: &BatchNormSaved,
    gamma: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let shape = saved.xhat.shape();
    let inner: usize = shape[2..].iter().product();
    let count = (saved.xhat.numel() / c) as f64;
    let (xh, gd) = (saved.xhat.data(), g.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (&x, &gv)) in xh.iter().zip(gd).enumerate() {
        let ch = (i / inner) % c;
        dgamma[ch] += gv * x;
        dbeta[ch] += gv;
    }
    // With dxhat = g * gamma: sum(dxhat) = gamma * dbeta and
    // sum(dxhat * xhat) = gamma * dgamma.
    let dx = xh
        .iter()
        .zip(gd)
        .enumerate()
        .map(|(i, (&x, &gv))| {
            let ch = (i / inner) % c;
            let gm = gamma.data()[ch];
            saved.inv_std[ch] / count
                * (count * gv * gm - gm * dbeta[ch] - x * gm * dgamma[ch])
        })
        .collect();
    (
        Tensor::new(shape.to_vec(), dx).unwrap(),
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    )
}

/// Eval-mode batch norm with fixed statistics. Returns the output and the
/// normalized input.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Tensor, BatchNormSaved)> {
    let (c, inner) = check_bn_params(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(invalid("batch_norm", x, "running statistics have wrong width"));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    for (i, v) in x.data().iter().enumerate() {
        let ch = (i / inner) % c;
        xhat[i] = (v - mean[ch]) * inv_std[ch];
        y[i] = gamma.data()[ch] * xhat[i] + beta.data()[ch];
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BatchNormSaved {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        },
    ))
}

pub fn batch_norm_eval_backward(
    saved: &BatchNormSaved,
    gamma: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let shape = saved.xhat.shape();
    let inner: usize = shape[2..].iter().product();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = vec![0.0; g.numel()];
    for (i, (&x, &gv)) in saved.xhat.data().iter().zip(g.data()).enumerate() {
        let ch = (i / inner) % c;
        dgamma[ch] += gv * x;
        dbeta[ch] += gv;
        dx[i] = gv * gamma.data()[ch] * saved.inv_std[ch];
    }
    (
        Tensor::new(shape.to_vec(), dx).unwrap(),
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    )
}
