//! Differentiable layer primitives on `f64` ndarrays.
//!
//! Every layer exposes an explicit forward pass that returns a cache and a
//! backward pass that consumes it, so the networks built on top can run
//! hand-written backpropagation without a tape.

use ndarray::prelude::*;

use crate::error::{Error, Result};

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros(usize),
    Replicate(usize),
}

impl Padding {
    pub fn width(&self) -> usize {
        match *self {
            Padding::Zeros(p) | Padding::Replicate(p) => p,
        }
    }
}

/// 2-D convolution, NCHW layout, square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// (out_channels, in_channels, k, k)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: Padding,
}

pub struct Conv2dCache {
    /// im2col matrix of the padded input, (C*k*k, B*OH*OW)
    col: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    out_spatial: (usize, usize),
}

fn pad_input(x: &Array4<f64>, padding: Padding) -> Array4<f64> {
    let p = padding.width();
    if p == 0 {
        return x.clone();
    }
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((b, c, h + 2 * p, w + 2 * p));
    match padding {
        Padding::Zeros(_) => {
            out.slice_mut(s![.., .., p..p + h, p..p + w]).assign(x);
        }
        Padding::Replicate(_) => {
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h + 2 * p {
                        let si = i.saturating_sub(p).min(h - 1);
                        for j in 0..w + 2 * p {
                            let sj = j.saturating_sub(p).min(w - 1);
                            out[[bi, ci, i, j]] = x[[bi, ci, si, sj]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter a gradient over the padded input back onto the unpadded input.
fn unpad_grad(dpad: &Array4<f64>, padding: Padding, h: usize, w: usize) -> Array4<f64> {
    let p = padding.width();
    if p == 0 {
        return dpad.clone();
    }
    let (b, c, _, _) = dpad.dim();
    match padding {
        Padding::Zeros(_) => dpad.slice(s![.., .., p..p + h, p..p + w]).to_owned(),
        Padding::Replicate(_) => {
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h + 2 * p {
                        let si = i.saturating_sub(p).min(h - 1);
                        for j in 0..w + 2 * p {
                            let sj = j.saturating_sub(p).min(w - 1);
                            dx[[bi, ci, si, sj]] += dpad[[bi, ci, i, j]];
                        }
                    }
                }
            }
            dx
        }
    }
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: Padding) -> Self {
        Conv2d {
            weight: Array4::zeros((out_ch, in_ch, k, k)),
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().2;
        let p = self.padding.width();
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Conv2dCache)> {
        let (b, c, h, w) = x.dim();
        let (oc, ic, k, _) = self.weight.dim();
        if c != ic {
            return Err(Error::shape(format!(
                "conv expects {ic} input channels, got {c}"
            )));
        }
        let (oh, ow) = self.out_spatial(h, w);
        let padded = pad_input(x, self.padding);
        let mut col = Array2::<f64>::zeros((ic * k * k, b * oh * ow));
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let cidx = bi * oh * ow + i * ow + j;
                    let (i0, j0) = (i * self.stride, j * self.stride);
                    let mut row = 0;
                    for ci in 0..ic {
                        for ki in 0..k {
                            for kj in 0..k {
                                col[[row, cidx]] = padded[[bi, ci, i0 + ki, j0 + kj]];
                                row += 1;
                            }
                        }
                    }
                }
            }
        }
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((oc, ic * k * k))
            .expect("contiguous kernel");
        let mut out_mat = wmat.dot(&col); // (oc, b*oh*ow)
        for (o, mut row) in out_mat.outer_iter_mut().enumerate() {
            row += self.bias[o];
        }
        let mut y = Array4::<f64>::zeros((b, oc, oh, ow));
        for o in 0..oc {
            for bi in 0..b {
                for i in 0..oh {
                    for j in 0..ow {
                        y[[bi, o, i, j]] = out_mat[[o, bi * oh * ow + i * ow + j]];
                    }
                }
            }
        }
        Ok((
            y,
            Conv2dCache {
                col,
                in_shape: (b, c, h, w),
                out_spatial: (oh, ow),
            },
        ))
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(
        &self,
        cache: &Conv2dCache,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
        let (b, c, h, w) = cache.in_shape;
        let (oc, ic, k, _) = self.weight.dim();
        let (oh, ow) = cache.out_spatial;
        let mut dy_mat = Array2::<f64>::zeros((oc, b * oh * ow));
        for o in 0..oc {
            for bi in 0..b {
                for i in 0..oh {
                    for j in 0..ow {
                        dy_mat[[o, bi * oh * ow + i * ow + j]] = dy[[bi, o, i, j]];
                    }
                }
            }
        }
        let dw_mat = dy_mat.dot(&cache.col.t()); // (oc, ic*k*k)
        let dweight = dw_mat
            .into_shape_with_order((oc, ic, k, k))
            .expect("contiguous");
        let dbias = dy_mat.sum_axis(Axis(1));
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((oc, ic * k * k))
            .expect("contiguous kernel");
        let dcol = wmat.t().dot(&dy_mat); // (ic*k*k, b*oh*ow)
        let p = self.padding.width();
        let mut dpad = Array4::<f64>::zeros((b, c, h + 2 * p, w + 2 * p));
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let cidx = bi * oh * ow + i * ow + j;
                    let (i0, j0) = (i * self.stride, j * self.stride);
                    let mut row = 0;
                    for ci in 0..ic {
                        for ki in 0..k {
                            for kj in 0..k {
                                dpad[[bi, ci, i0 + ki, j0 + kj]] += dcol[[row, cidx]];
                                row += 1;
                            }
                        }
                    }
                }
            }
        }
        let dx = unpad_grad(&dpad, self.padding, h, w);
        (dx, dweight, dbias)
    }
}

/// Batch normalization over the channel axis of NCHW tensors.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    n_per_channel: usize,
}

/// Batch statistics to fold into the running estimates after a train-mode pass.
pub struct BatchNormStats {
    pub mean: Array1<f64>,
    pub var_unbiased: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Train-mode forward using batch statistics. Pure; the caller applies
    /// the returned stats via [`BatchNorm::update_running`].
    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, BatchNormCache, BatchNormStats) {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let ch = x.slice(s![.., ci, .., ..]);
            let m = ch.sum() / n;
            mean[ci] = m;
            var[ci] = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for ci in 0..c {
            let mut ch = xhat.slice_mut(s![.., ci, .., ..]);
            ch.mapv_inplace(|v| (v - mean[ci]) * inv_std[ci]);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let mut ch = y.slice_mut(s![.., ci, .., ..]);
            ch.mapv_inplace(|v| v * self.scale[ci] + self.shift[ci]);
        }
        let bessel = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let stats = BatchNormStats {
            mean,
            var_unbiased: var.mapv(|v| v * bessel),
        };
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                n_per_channel: b * h * w,
            },
            stats,
        )
    }

    pub fn update_running(&mut self, stats: &BatchNormStats) {
        let m = self.momentum;
        self.running_mean
            .zip_mut_with(&stats.mean, |r, &b| *r = (1.0 - m) * *r + m * b);
        self.running_var
            .zip_mut_with(&stats.var_unbiased, |r, &b| *r = (1.0 - m) * *r + m * b);
    }

    /// Eval-mode forward using running statistics.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let c = x.dim().1;
        let mut y = x.clone();
        for ci in 0..c {
            let inv = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (m, g, s) = (self.running_mean[ci], self.scale[ci], self.shift[ci]);
            let mut ch = y.slice_mut(s![.., ci, .., ..]);
            ch.mapv_inplace(|v| (v - m) * inv * g + s);
        }
        y
    }

    /// Returns (dx, dscale, dshift) for a train-mode pass.
    pub fn backward_train(
        &self,
        cache: &BatchNormCache,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
        let (b, c, h, w) = dy.dim();
        let n = cache.n_per_channel as f64;
        let mut dscale = Array1::<f64>::zeros(c);
        let mut dshift = Array1::<f64>::zeros(c);
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        for ci in 0..c {
            let dy_c = dy.slice(s![.., ci, .., ..]);
            let xhat_c = cache.xhat.slice(s![.., ci, .., ..]);
            let sum_dy = dy_c.sum();
            let sum_dy_xhat = dy_c
                .iter()
                .zip(xhat_c.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>();
            dscale[ci] = sum_dy_xhat;
            dshift[ci] = sum_dy;
            let g = self.scale[ci] * cache.inv_std[ci] / n;
            let mut dx_c = dx.slice_mut(s![.., ci, .., ..]);
            for ((d, &dyv), &xh) in dx_c.iter_mut().zip(dy_c.iter()).zip(xhat_c.iter()) {
                *d = g * (n * dyv - sum_dy - xh * sum_dy_xhat);
            }
        }
        (dx, dscale, dshift)
    }
}

/// LeakyReLU with configurable negative slope.
pub fn leaky_relu(x: &Array4<f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Array4<f64>, dy: &Array4<f64>, slope: f64) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
    dx
}

/// Fully connected layer, weight shape (out, in).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.dim().1 != self.weight.dim().1 {
            return Err(Error::shape(format!(
                "linear expects input dim {}, got {}",
                self.weight.dim().1,
                x.dim().1
            )));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Returns (dx, dweight, dbias); `x` is the forward input.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let dx = dy.dot(&self.weight);
        let dweight = dy.t().dot(x);
        let dbias = dy.sum_axis(Axis(0));
        (dx, dweight, dbias)
    }
}

/// 2x2 max pooling with stride 2.
pub struct MaxPoolCache {
    argmax: Vec<(usize, usize)>, // per output cell: (i, j) in the input
    in_shape: (usize, usize, usize, usize),
}

pub fn max_pool2(x: &Array4<f64>) -> (Array4<f64>, MaxPoolCache) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f64>::zeros((b, c, oh, ow));
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = (2 * i, 2 * j);
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = x[[bi, ci, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                at = (2 * i + di, 2 * j + dj);
                            }
                        }
                    }
                    y[[bi, ci, i, j]] = best;
                    argmax.push(at);
                }
            }
        }
    }
    (
        y,
        MaxPoolCache {
            argmax,
            in_shape: (b, c, h, w),
        },
    )
}

pub fn max_pool2_backward(cache: &MaxPoolCache, dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = cache.in_shape;
    let (_, _, oh, ow) = dy.dim();
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let mut idx = 0;
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let (si, sj) = cache.argmax[idx];
                    dx[[bi, ci, si, sj]] += dy[[bi, ci, i, j]];
                    idx += 1;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    y[[bi, ci, i, j]] = x[[bi, ci, i / 2, j / 2]];
                }
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    dx[[bi, ci, i / 2, j / 2]] += dy[[bi, ci, i, j]];
                }
            }
        }
    }
    dx
}

pub fn check_finite4(x: &Array4<f64>, location: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            location: location.to_string(),
        })
    }
}
