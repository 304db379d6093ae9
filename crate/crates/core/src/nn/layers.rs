//! Layer implementations over channel-major `(C, N, H, W)` batches.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Ctx, Layer, Param, Real};

fn cached<'a, U>(slot: &'a Option<U>, layer: &str) -> &'a U {
    slot.as_ref()
        .unwrap_or_else(|| panic!("{layer}: backward called without a recorded forward pass"))
}

/// 2-D convolution with square kernels and zero padding.
pub struct Conv2d<T: Real> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(out, in * k * k)`, rows in `(c, ky, kx)` order.
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
    grad_w: Array2<T>,
    grad_b: Option<Array1<T>>,
    cols: Option<Array2<T>>,
    in_dim: (usize, usize, usize, usize),
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-normal initialized convolution.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || T::lit(normal.sample(rng)));
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            grad_w: Array2::zeros(weight.dim()),
            weight,
            bias: bias.then(|| Array1::zeros(out_channels)),
            grad_b: bias.then(|| Array1::zeros(out_channels)),
            cols: None,
            in_dim: (0, 0, 0, 0),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<T>, ctx: &Ctx) -> Array2<T> {
        let (c, n, h, w) = x.dim();
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let mut cols = Array2::<T>::zeros((c * k * k, n * ho * wo));
        let src = x.as_slice().expect("standard layout input");
        ctx.exec.for_each_axis_mut(cols.view_mut(), Axis(0), |r, mut row| {
            let ch = r / (k * k);
            let ky = ((r / k) % k) as isize;
            let kx = (r % k) as isize;
            let row = row.as_slice_mut().expect("contiguous row");
            let plane = &src[ch * n * h * w..(ch + 1) * n * h * w];
            for b in 0..n {
                let img = &plane[b * h * w..(b + 1) * h * w];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx - p;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        });
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, ctx: &Ctx) -> Array4<T> {
        let (c, n, h, w) = self.in_dim;
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let mut dx = Array4::<T>::zeros((c, n, h, w));
        ctx.exec.for_each_axis_mut(dx.view_mut(), Axis(0), |ch, mut plane| {
            let plane = plane.as_slice_mut().expect("contiguous plane");
            for ky in 0..k {
                for kx in 0..k {
                    let row = dcols.row(ch * k * k + ky * k + kx);
                    let row = row.as_slice().expect("contiguous row");
                    for b in 0..n {
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (b * h + iy as usize) * w;
                            let src = &row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    plane[base + ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Array4<T>, ctx: &Ctx) -> Array4<T> {
        let (c, n, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let cols = self.im2col(x, ctx);
        let mut y = Array2::<T>::zeros((self.out_channels, n * ho * wo));
        general_mat_mul(T::one(), &self.weight, &cols, T::zero(), &mut y);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        if ctx.record {
            self.cols = Some(cols);
            self.in_dim = (c, n, h, w);
        }
        y.into_shape_with_order((self.out_channels, n, ho, wo))
            .expect("gemm output is contiguous")
    }

    fn backward(&mut self, grad: &Array4<T>, ctx: &Ctx, need_input_grad: bool) -> Option<Array4<T>> {
        let cols = cached(&self.cols, "conv2d");
        let (o, n, ho, wo) = grad.dim();
        let g = grad.as_standard_layout();
        let g2: ArrayView2<T> = g.view().into_shape_with_order((o, n * ho * wo)).expect("contiguous grad");
        general_mat_mul(T::one(), &g2, &cols.t(), T::one(), &mut self.grad_w);
        if let Some(gb) = &mut self.grad_b {
            *gb += &g2.sum_axis(Axis(1));
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = Array2::<T>::zeros(cols.dim());
        general_mat_mul(T::one(), &self.weight.t(), &g2, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, ctx))
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        let mut out = vec![Param {
            value: self.weight.as_slice_mut().expect("contiguous"),
            grad: self.grad_w.as_slice_mut().expect("contiguous"),
        }];
        if let (Some(b), Some(gb)) = (&mut self.bias, &mut self.grad_b) {
            out.push(Param {
                value: b.as_slice_mut().expect("contiguous"),
                grad: gb.as_slice_mut().expect("contiguous"),
            });
        }
        out
    }

    fn describe(&self) -> String {
        format!(
            "conv{}x{}({}->{}, s{})",
            self.kernel, self.kernel, self.in_channels, self.out_channels, self.stride
        )
    }
}

/// Batch normalization over `(N, H, W)` per channel.
pub struct BatchNorm2d<T: Real> {
    pub channels: usize,
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
    grad_gamma: Array1<T>,
    grad_beta: Array1<T>,
    xhat: Option<Array4<T>>,
    inv_std: Vec<T>,
    cached_train: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            xhat: None,
            inv_std: Vec::new(),
            cached_train: false,
        }
    }
}

impl<T: Real> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Array4<T>, ctx: &Ctx) -> Array4<T> {
        let c = x.dim().0;
        assert_eq!(c, self.channels, "batchnorm channels");
        let m = x.len() / c;
        let src = x.as_slice().expect("standard layout input");
        let (mean, var): (Vec<T>, Vec<T>) = if ctx.train {
            ctx.exec
                .map(c, |ch| {
                    let plane = &src[ch * m..(ch + 1) * m];
                    let mut sum = 0.0f64;
                    for &v in plane {
                        sum += v.as_f64();
                    }
                    let mean = sum / m as f64;
                    let mut sq = 0.0f64;
                    for &v in plane {
                        let d = v.as_f64() - mean;
                        sq += d * d;
                    }
                    (T::lit(mean), T::lit(sq / m as f64))
                })
                .into_iter()
                .unzip()
        } else {
            (self.running_mean.to_vec(), self.running_var.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        if ctx.train {
            let mo = self.momentum;
            let unbias = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { T::one() };
            for ch in 0..c {
                self.running_mean[ch] = (T::one() - mo) * self.running_mean[ch] + mo * mean[ch];
                self.running_var[ch] = (T::one() - mo) * self.running_var[ch] + mo * var[ch] * unbias;
            }
        }
        let mut xhat = x.clone();
        ctx.exec.for_each_axis_mut(xhat.view_mut(), Axis(0), |ch, mut plane| {
            let (mu, is) = (mean[ch], inv_std[ch]);
            plane.mapv_inplace(|v| (v - mu) * is);
        });
        let mut y = xhat.clone();
        let (gamma, beta) = (&self.gamma, &self.beta);
        ctx.exec.for_each_axis_mut(y.view_mut(), Axis(0), |ch, mut plane| {
            let (g, b) = (gamma[ch], beta[ch]);
            plane.mapv_inplace(|v| v * g + b);
        });
        if ctx.record {
            self.xhat = Some(xhat);
            self.inv_std = inv_std;
            self.cached_train = ctx.train;
        }
        y
    }

    fn backward(&mut self, grad: &Array4<T>, ctx: &Ctx, need_input_grad: bool) -> Option<Array4<T>> {
        let xhat = cached(&self.xhat, "batchnorm");
        let c = self.channels;
        let m = xhat.len() / c;
        let gs = grad.as_standard_layout();
        let g = gs.as_slice().expect("contiguous grad");
        let xs = xhat.as_slice().expect("contiguous cache");
        let sums: Vec<(T, T)> = ctx.exec.map(c, |ch| {
            let gp = &g[ch * m..(ch + 1) * m];
            let xp = &xs[ch * m..(ch + 1) * m];
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for (&a, &b) in gp.iter().zip(xp) {
                sg += a;
                sgx += a * b;
            }
            (sg, sgx)
        });
        for (ch, &(sg, sgx)) in sums.iter().enumerate() {
            self.grad_beta[ch] += sg;
            self.grad_gamma[ch] += sgx;
        }
        if !need_input_grad {
            return None;
        }
        let mut dx = gs.into_owned();
        let gamma = &self.gamma;
        let inv_std = &self.inv_std;
        let train = self.cached_train;
        let mf = T::lit(m as f64);
        ctx.exec.for_each_axis_mut(dx.view_mut(), Axis(0), |ch, mut plane| {
            let scale = gamma[ch] * inv_std[ch];
            let plane = plane.as_slice_mut().expect("contiguous plane");
            if train {
                let (sg, sgx) = sums[ch];
                let xp = &xs[ch * m..(ch + 1) * m];
                for (d, &xh) in plane.iter_mut().zip(xp) {
                    *d = scale * (*d - sg / mf - xh * sgx / mf);
                }
            } else {
                plane.iter_mut().for_each(|d| *d *= scale);
            }
        });
        Some(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                value: self.gamma.as_slice_mut().expect("contiguous"),
                grad: self.grad_gamma.as_slice_mut().expect("contiguous"),
            },
            Param {
                value: self.beta.as_slice_mut().expect("contiguous"),
                grad: self.grad_beta.as_slice_mut().expect("contiguous"),
            },
        ]
    }

    fn buffers(&mut self) -> Vec<&mut [T]> {
        vec![
            self.running_mean.as_slice_mut().expect("contiguous"),
            self.running_var.as_slice_mut().expect("contiguous"),
        ]
    }

    fn describe(&self) -> String {
        format!("bn({})", self.channels)
    }
}

#[derive(Default)]
pub struct Relu<T: Real> {
    out: Option<Array4<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Relu { out: None }
    }
}

impl<T: Real> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Array4<T>, ctx: &Ctx) -> Array4<T> {
        let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
        if ctx.record {
            self.out = Some(y.clone());
        }
        y
    }

    fn backward(&mut self, grad: &Array4<T>, _ctx: &Ctx, need_input_grad: bool) -> Option<Array4<T>> {
        if !need_input_grad {
            return None;
        }
        let out = cached(&self.out, "relu");
        let mut dx = grad.to_owned();
        Zip::from(&mut dx).and(out).for_each(|d, &y| {
            if y <= T::zero() {
                *d = T::zero();
            }
        });
        Some(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        Vec::new()
    }

    fn describe(&self) -> String {
        "relu".into()
    }
}

#[derive(Default)]
pub struct Sigmoid<T: Real> {
    out: Option<Array4<T>>,
}

impl<T: Real> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid { out: None }
    }
}

impl<T: Real> Layer<T> for Sigmoid<T> {
    fn forward(&mut self, x: &Array4<T>, ctx: &Ctx) -> Array4<T> {
        let y = x.mapv(|v| T::one() / (T::one() + (-v).exp()));
        if ctx.record {
            self.out = Some(y.clone());
        }
        y
    }

    fn backward(&mut self, grad: &Array4<T>, _ctx: &Ctx, need_input_grad: bool) -> Option<Array4<T>> {
        if !need_input_grad {
            return None;
        }
        let out = cached(&self.out, "sigmoid");
        let mut dx = grad.to_owned();
        Zip::from(&mut dx).and(out).for_each(|d, &y| *d *= y * (T::one() - y));
        Some(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        Vec::new()
    }

    fn describe(&self) -> String {
        "sigmoid".into()
    }
}

/// Nearest-neighbour 2x spatial upsampling.
#[derive(Default)]
pub struct Upsample2x;

impl<T: Real> Layer<T> for Upsample2x {
    fn forward(&mut self, x: &Array4<T>, _ctx: &Ctx) -> Array4<T> {
        let (c, n, h, w) = x.dim();
        Array4::from_shape_fn((c, n, 2 * h, 2 * w), |(ci, ni, y, xx)| x[[ci, ni, y / 2, xx / 2]])
    }

    fn backward(&mut self, grad: &Array4<T>, _ctx: &Ctx, need_input_grad: bool) -> Option<Array4<T>> {
        if !need_input_grad {
            return None;
        }
        let (c, n, h2, w2) = grad.dim();
        let mut dx = Array4::<T>::zeros((c, n, h2 / 2, w2 / 2));
        for ((ci, ni, y, xx), &g) in grad.indexed_iter() {
            dx[[ci, ni, y / 2, xx / 2]] += g;
        }
        Some(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        Vec::new()
    }

    fn describe(&self) -> String {
        "upsample2x".into()
    }
}

/// Global average pooling followed by a linear classifier.
///
/// Consumes `(C, N, H, W)` features and produces `(N, K)` logits.
pub struct LinearHead<T: Real> {
    pub in_features: usize,
    pub classes: usize,
    /// `(K, C)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    grad_w: Array2<T>,
    grad_b: Array1<T>,
    pooled: Option<Array2<T>>,
    spatial: (usize, usize),
}

impl<T: Real> LinearHead<T> {
    /// Uniform `±1/sqrt(C)` initialization for weights and bias.
    pub fn new(in_features: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let weight = Array2::from_shape_simple_fn((classes, in_features), || T::lit(dist.sample(rng)));
        let bias = Array1::from_shape_simple_fn(classes, || T::lit(dist.sample(rng)));
        LinearHead {
            in_features,
            classes,
            grad_w: Array2::zeros(weight.dim()),
            grad_b: Array1::zeros(classes),
            weight,
            bias,
            pooled: None,
            spatial: (0, 0),
        }
    }

    pub fn forward(&mut self, features: &Array4<T>, record: bool) -> Array2<T> {
        let (c, n, h, w) = features.dim();
        assert_eq!(c, self.in_features, "head input channels");
        let pooled: Array2<T> = features
            .view()
            .into_shape_with_order((c, n, h * w))
            .expect("contiguous features")
            .mean_axis(Axis(2))
            .expect("non-empty spatial extent");
        let mut logits = Array2::<T>::zeros((n, self.classes));
        general_mat_mul(T::one(), &pooled.t(), &self.weight.t(), T::zero(), &mut logits);
        for mut row in logits.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        if record {
            self.pooled = Some(pooled);
            self.spatial = (h, w);
        }
        logits
    }

    /// Accumulates head gradients and returns the gradient w.r.t. the features.
    pub fn backward(&mut self, dlogits: &Array2<T>) -> Array4<T> {
        let pooled = cached(&self.pooled, "linear head");
        let (c, n) = pooled.dim();
        general_mat_mul(T::one(), &dlogits.t(), &pooled.t(), T::one(), &mut self.grad_w);
        self.grad_b += &dlogits.sum_axis(Axis(0));
        let dpooled = self.weight.t().dot(&dlogits.t()); // (C, N)
        let (h, w) = self.spatial;
        let inv = T::one() / T::lit((h * w) as f64);
        Array4::from_shape_fn((c, n, h, w), |(ci, ni, _, _)| dpooled[[ci, ni]] * inv)
    }

    pub fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                value: self.weight.as_slice_mut().expect("contiguous"),
                grad: self.grad_w.as_slice_mut().expect("contiguous"),
            },
            Param {
                value: self.bias.as_slice_mut().expect("contiguous"),
                grad: self.grad_b.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

/// Pre-activation residual block: `BN-ReLU-conv-BN-ReLU-conv` plus shortcut.
pub struct PreActBlock<T: Real> {
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv1: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu<T>,
    conv2: Conv2d<T>,
    shortcut: Option<Conv2d<T>>,
}

impl<T: Real> PreActBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng));
        PreActBlock {
            bn1: BatchNorm2d::new(in_ch),
            relu1: Relu::new(),
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng),
            bn2: BatchNorm2d::new(out_ch),
            relu2: Relu::new(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng),
            shortcut,
        }
    }
}

impl<T: Real> Layer<T> for PreActBlock<T> {
    fn forward(&mut self, x: &Array4<T>, ctx: &Ctx) -> Array4<T> {
        let a = self.relu1.forward(&self.bn1.forward(x, ctx), ctx);
        let sc = match &mut self.shortcut {
            Some(conv) => conv.forward(&a, ctx),
            None => x.clone(),
        };
        let h = self.conv1.forward(&a, ctx);
        let h = self.relu2.forward(&self.bn2.forward(&h, ctx), ctx);
        let mut out = self.conv2.forward(&h, ctx);
        out += &sc;
        out
    }

    fn backward(&mut self, grad: &Array4<T>, ctx: &Ctx, need_input_grad: bool) -> Option<Array4<T>> {
        let g = self.conv2.backward(grad, ctx, true).expect("input grad requested");
        let g = self.relu2.backward(&g, ctx, true).expect("input grad requested");
        let g = self.bn2.backward(&g, ctx, true).expect("input grad requested");
        let mut da = self.conv1.backward(&g, ctx, true).expect("input grad requested");
        let residual = match &mut self.shortcut {
            Some(conv) => {
                da += &conv.backward(grad, ctx, true).expect("input grad requested");
                None
            }
            None => Some(grad),
        };
        let g = self.relu1.backward(&da, ctx, true).expect("input grad requested");
        let mut dx = self.bn1.backward(&g, ctx, need_input_grad)?;
        if let Some(r) = residual {
            dx += r;
        }
        Some(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        let mut out = self.bn1.params();
        out.extend(self.conv1.params());
        out.extend(self.bn2.params());
        out.extend(self.conv2.params());
        if let Some(sc) = &mut self.shortcut {
            out.extend(sc.params());
        }
        out
    }

    fn buffers(&mut self) -> Vec<&mut [T]> {
        let mut out = self.bn1.buffers();
        out.extend(self.bn2.buffers());
        out
    }

    fn describe(&self) -> String {
        format!(
            "preact({}->{}, s{})",
            self.conv1.in_channels, self.conv1.out_channels, self.conv1.stride
        )
    }
}
