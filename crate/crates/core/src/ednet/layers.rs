//! Layers with explicit forward and backward passes.
//!
//! `forward` is the inference path and takes `&self`; `forward_train`
//! caches what `backward` needs and updates batch statistics.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Element, MatMut, MatRef, Tensor};

/// Learnable parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Element> Param<T> {
    pub fn new(name: String, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Param {
            name,
            shape,
            value,
            grad,
        }
    }

    fn he_normal(name: String, shape: Vec<usize>, fan_in: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let len = shape.iter().product();
        let value = (0..len).map(|_| T::of(dist.sample(rng))).collect();
        Param::new(name, shape, value)
    }

    fn filled(name: String, len: usize, v: f64) -> Self {
        Param::new(name, vec![len], vec![T::of(v); len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Upper bound on im2col buffer elements; larger convolutions are banded by
/// output rows so full-resolution inference stays within memory.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[cout, cin·k·k]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::he_normal(format!("{name}.weight"), vec![cout, cin, k, k], fan_in, gain, rng),
            bias: bias.then(|| Param::filled(format!("{name}.bias"), cout, 0.0)),
            input: None,
        }
    }

    pub fn out_dim(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn band_rows(&self, wo: usize) -> usize {
        let kk = self.cin * self.k * self.k;
        (COL_BUDGET / (kk * wo).max(1)).max(1)
    }

    /// Copies the receptive fields of output rows `y0..y1` into `col`,
    /// laid out `[cin·k·k, (y1-y0)·wo]`.
    fn im2col(&self, x: &[T], h: usize, w: usize, y0: usize, y1: usize, wo: usize, col: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let bl = (y1 - y0) * wo;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * bl;
                    for oy in y0..y1 {
                        let dst = &mut col[row + (oy - y0) * wo..row + (oy - y0 + 1) * wo];
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let off = kx as isize - p;
                        if s == 1 {
                            let lo = (-off).clamp(0, wo as isize) as usize;
                            let hi = (w as isize - off).clamp(lo as isize, wo as isize) as usize;
                            dst[..lo].fill(T::zero());
                            dst[lo..hi].copy_from_slice(
                                &src[(lo as isize + off) as usize..(hi as isize + off) as usize],
                            );
                            dst[hi..].fill(T::zero());
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + off;
                                *d = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, y0: usize, y1: usize, wo: usize, dx: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let bl = (y1 - y0) * wo;
        for c in 0..self.cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * bl;
                    for oy in y0..y1 {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &col[row + (oy - y0) * wo..row + (oy - y0 + 1) * wo];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let off = kx as isize - p;
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "{}: input channels", self.weight.name);
        let (ho, wo) = (self.out_dim(x.h), self.out_dim(x.w));
        let mut out = Tensor::zeros(x.n, self.cout, ho, wo);
        let kk = self.cin * self.k * self.k;
        let hw_out = ho * wo;
        let mut col = Vec::new();
        for i in 0..x.n {
            let xs = x.sample(i);
            let ys = out.sample_mut(i);
            if self.is_pointwise() {
                gemm(
                    self.cout,
                    kk,
                    hw_out,
                    T::one(),
                    MatRef { data: &self.weight.value, rs: kk, cs: 1 },
                    MatRef { data: xs, rs: hw_out, cs: 1 },
                    T::zero(),
                    MatMut { data: ys, rs: hw_out, cs: 1 },
                );
            } else {
                let band = self.band_rows(wo);
                let mut y0 = 0;
                while y0 < ho {
                    let y1 = (y0 + band).min(ho);
                    let bl = (y1 - y0) * wo;
                    col.resize(kk * bl, T::zero());
                    self.im2col(xs, x.h, x.w, y0, y1, wo, &mut col);
                    gemm(
                        self.cout,
                        kk,
                        bl,
                        T::one(),
                        MatRef { data: &self.weight.value, rs: kk, cs: 1 },
                        MatRef { data: &col, rs: bl, cs: 1 },
                        T::zero(),
                        MatMut { data: &mut ys[y0 * wo..], rs: hw_out, cs: 1 },
                    );
                    y0 = y1;
                }
            }
            if let Some(b) = &self.bias {
                for (c, &bv) in b.value.iter().enumerate() {
                    ys[c * hw_out..(c + 1) * hw_out].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let x = self.input.take().expect("backward without forward_train");
        let (ho, wo) = (dy.h, dy.w);
        assert_eq!(
            [dy.n, dy.c, ho, wo],
            [x.n, self.cout, self.out_dim(x.h), self.out_dim(x.w)],
            "{}: output gradient shape",
            self.weight.name
        );
        let hw_out = ho * wo;
        let kk = self.cin * self.k * self.k;
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for i in 0..x.n {
            let xs = x.sample(i);
            let dys = dy.sample(i);
            if let Some(b) = &mut self.bias {
                for (c, g) in b.grad.iter_mut().enumerate() {
                    *g += dys[c * hw_out..(c + 1) * hw_out].iter().copied().sum::<T>();
                }
            }
            if self.is_pointwise() {
                gemm(
                    self.cout,
                    hw_out,
                    kk,
                    T::one(),
                    MatRef { data: dys, rs: hw_out, cs: 1 },
                    MatRef { data: xs, rs: 1, cs: hw_out },
                    T::one(),
                    MatMut { data: &mut self.weight.grad, rs: kk, cs: 1 },
                );
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        kk,
                        self.cout,
                        hw_out,
                        T::one(),
                        MatRef { data: &self.weight.value, rs: 1, cs: kk },
                        MatRef { data: dys, rs: hw_out, cs: 1 },
                        T::zero(),
                        MatMut { data: dx.sample_mut(i), rs: hw_out, cs: 1 },
                    );
                }
                continue;
            }
            let band = self.band_rows(wo);
            let mut y0 = 0;
            while y0 < ho {
                let y1 = (y0 + band).min(ho);
                let bl = (y1 - y0) * wo;
                col.resize(kk * bl, T::zero());
                self.im2col(xs, x.h, x.w, y0, y1, wo, &mut col);
                gemm(
                    self.cout,
                    bl,
                    kk,
                    T::one(),
                    MatRef { data: &dys[y0 * wo..], rs: hw_out, cs: 1 },
                    MatRef { data: &col, rs: 1, cs: bl },
                    T::one(),
                    MatMut { data: &mut self.weight.grad, rs: kk, cs: 1 },
                );
                if let Some(dx) = dx.as_mut() {
                    dcol.resize(kk * bl, T::zero());
                    gemm(
                        kk,
                        self.cout,
                        bl,
                        T::one(),
                        MatRef { data: &self.weight.value, rs: 1, cs: kk },
                        MatRef { data: &dys[y0 * wo..], rs: hw_out, cs: 1 },
                        T::zero(),
                        MatMut { data: &mut dcol, rs: bl, cs: 1 },
                    );
                    self.col2im(&dcol, x.h, x.w, y0, y1, wo, dx.sample_mut(i));
                }
                y0 = y1;
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

/// 2×2 transposed convolution with stride 2: doubles height and width.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2<T> {
    pub cin: usize,
    pub cout: usize,
    /// `[cin, cout·4]`, taps ordered `(dy, dx)`.
    pub weight: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Element> ConvTranspose2x2<T> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ConvTranspose2x2 {
            cin,
            cout,
            weight: Param::he_normal(format!("{name}.weight"), vec![cin, cout, 2, 2], cin, 2.0, rng),
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "{}: input channels", self.weight.name);
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let m = self.cout * 4;
        let mut out = Tensor::zeros(x.n, self.cout, 2 * h, 2 * w);
        let mut ycol = vec![T::zero(); m * hw];
        for i in 0..x.n {
            gemm(
                m,
                self.cin,
                hw,
                T::one(),
                MatRef { data: &self.weight.value, rs: 1, cs: m },
                MatRef { data: x.sample(i), rs: hw, cs: 1 },
                T::zero(),
                MatMut { data: &mut ycol, rs: hw, cs: 1 },
            );
            let ys = out.sample_mut(i);
            for co in 0..self.cout {
                let plane = &mut ys[co * 4 * hw..(co + 1) * 4 * hw];
                for tap in 0..4 {
                    let (dy, dx) = (tap / 2, tap % 2);
                    let src = &ycol[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for y in 0..h {
                        let row = &mut plane[(2 * y + dy) * 2 * w..(2 * y + dy + 1) * 2 * w];
                        for (xx, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                            row[2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("backward without forward_train");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let m = self.cout * 4;
        let mut dx = Tensor::zeros(x.n, x.c, h, w);
        let mut dycol = vec![T::zero(); m * hw];
        for i in 0..x.n {
            let dys = dy.sample(i);
            for co in 0..self.cout {
                let plane = &dys[co * 4 * hw..(co + 1) * 4 * hw];
                for tap in 0..4 {
                    let (ty, tx) = (tap / 2, tap % 2);
                    let dst = &mut dycol[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for y in 0..h {
                        let row = &plane[(2 * y + ty) * 2 * w..(2 * y + ty + 1) * 2 * w];
                        for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                            *d = row[2 * xx + tx];
                        }
                    }
                }
            }
            gemm(
                self.cin,
                hw,
                m,
                T::one(),
                MatRef { data: x.sample(i), rs: hw, cs: 1 },
                MatRef { data: &dycol, rs: 1, cs: hw },
                T::one(),
                MatMut { data: &mut self.weight.grad, rs: m, cs: 1 },
            );
            gemm(
                self.cin,
                m,
                hw,
                T::one(),
                MatRef { data: &self.weight.value, rs: m, cs: 1 },
                MatRef { data: &dycol, rs: hw, cs: 1 },
                T::zero(),
                MatMut { data: dx.sample_mut(i), rs: hw, cs: 1 },
            );
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Statistics per sample and channel over the spatial extent.
    #[default]
    Instance,
    /// Statistics per channel over the whole batch; running averages at
    /// inference.
    Batch,
}

pub const NORM_EPSILON: f64 = 1e-5;
const BATCH_MOMENTUM: f64 = 0.1;

/// Mean and biased variance of one group of values, accumulated in f64.
fn moments<'a, T: Element>(groups: impl Iterator<Item = &'a [T]> + Clone) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for g in groups.clone() {
        count += g.len();
        sum += g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for g in groups {
        var += g
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap_or(f64::NAN) - mean;
                d * d
            })
            .sum::<f64>();
    }
    (mean, var / count as f64)
}

/// Per-sample, per-channel standardization without the affine step:
/// subtract the spatial mean and divide by `sqrt(var + epsilon)`.
pub fn instance_normalize<T: Element>(x: &Tensor<T>, epsilon: f64) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..x.n {
        for c in 0..x.c {
            let (mean, var) = moments(std::iter::once(x.channel(i, c)));
            let inv = 1.0 / (var + epsilon).sqrt();
            let (mean, inv) = (T::of(mean), T::of(inv));
            out.channel_mut(i, c).iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub mode: NormMode,
    pub channels: usize,
    pub epsilon: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<NormCache<T>>,
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Tensor<T>,
    /// One entry per statistics group: `n·c` for instance, `c` for batch.
    inv_std: Vec<T>,
}

impl<T: Element> Norm<T> {
    pub fn new(name: &str, channels: usize, mode: NormMode) -> Self {
        Norm {
            mode,
            channels,
            epsilon: NORM_EPSILON,
            gamma: Param::filled(format!("{name}.gamma"), channels, 1.0),
            beta: Param::filled(format!("{name}.beta"), channels, 0.0),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    /// Standardizes in place and returns the per-group inverse deviations.
    fn standardize(&self, x: &mut Tensor<T>, use_running: bool) -> Vec<T> {
        let eps = self.epsilon;
        match (self.mode, use_running) {
            (NormMode::Instance, _) => {
                let mut inv_std = Vec::with_capacity(x.n * x.c);
                for i in 0..x.n {
                    for c in 0..x.c {
                        let (mean, var) = moments(std::iter::once(x.channel(i, c)));
                        let inv = T::of(1.0 / (var + eps).sqrt());
                        let mean = T::of(mean);
                        x.channel_mut(i, c).iter_mut().for_each(|v| *v = (*v - mean) * inv);
                        inv_std.push(inv);
                    }
                }
                inv_std
            }
            (NormMode::Batch, true) => {
                for c in 0..x.c {
                    let mean = self.running_mean[c];
                    let inv = T::one() / (self.running_var[c] + T::of(eps)).sqrt();
                    for i in 0..x.n {
                        x.channel_mut(i, c).iter_mut().for_each(|v| *v = (*v - mean) * inv);
                    }
                }
                Vec::new()
            }
            (NormMode::Batch, false) => {
                let mut inv_std = Vec::with_capacity(x.c);
                for c in 0..x.c {
                    let (mean, var) = {
                        let xr = &*x;
                        moments((0..xr.n).map(|i| xr.channel(i, c)))
                    };
                    let inv = T::of(1.0 / (var + eps).sqrt());
                    let m = T::of(mean);
                    for i in 0..x.n {
                        x.channel_mut(i, c).iter_mut().for_each(|v| *v = (*v - m) * inv);
                    }
                    inv_std.push(inv);
                }
                inv_std
            }
        }
    }

    fn affine(&self, x: &mut Tensor<T>) {
        for i in 0..x.n {
            for c in 0..x.c {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                x.channel_mut(i, c).iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        self.standardize(&mut y, true);
        self.affine(&mut y);
        y
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        if self.mode == NormMode::Batch {
            let m = T::of(BATCH_MOMENTUM);
            let count = (x.n * x.hw()) as f64;
            for c in 0..x.c {
                let (mean, var) = moments((0..x.n).map(|i| x.channel(i, c)));
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                self.running_mean[c] = self.running_mean[c] * (T::one() - m) + T::of(mean) * m;
                self.running_var[c] = self.running_var[c] * (T::one() - m) + T::of(unbiased) * m;
            }
        }
        let mut xhat = x.clone();
        let inv_std = self.standardize(&mut xhat, false);
        let mut y = xhat.clone();
        self.affine(&mut y);
        self.cache = Some(NormCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let NormCache { xhat, inv_std } = self.cache.take().expect("backward without forward_train");
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let (mut dg, mut db) = (T::zero(), T::zero());
            for i in 0..dy.n {
                for (&g, &xh) in dy.channel(i, c).iter().zip(xhat.channel(i, c)) {
                    dg += g * xh;
                    db += g;
                }
            }
            self.gamma.grad[c] += dg;
            self.beta.grad[c] += db;
        }
        // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) per group
        let group = |samples: &[usize], c: usize, inv: T, dx: &mut Tensor<T>| {
            let gamma = self.gamma.value[c];
            let count = T::of((samples.len() * dy.hw()) as f64);
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for &i in samples {
                for (&g, &xh) in dy.channel(i, c).iter().zip(xhat.channel(i, c)) {
                    s1 += g * gamma;
                    s2 += g * gamma * xh;
                }
            }
            let (m1, m2) = (s1 / count, s2 / count);
            for &i in samples {
                let dst = dx.channel_mut(i, c);
                for ((d, &g), &xh) in dst.iter_mut().zip(dy.channel(i, c)).zip(xhat.channel(i, c)) {
                    *d = inv * (g * gamma - m1 - xh * m2);
                }
            }
        };
        match self.mode {
            NormMode::Instance => {
                for i in 0..dy.n {
                    for c in 0..dy.c {
                        group(&[i], c, inv_std[i * dy.c + c], &mut dx);
                    }
                }
            }
            NormMode::Batch => {
                let all: Vec<usize> = (0..dy.n).collect();
                for c in 0..dy.c {
                    group(&all, c, inv_std[c], &mut dx);
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }
}

pub(crate) fn relu_inplace<T: Element>(x: &mut Tensor<T>) -> Vec<bool> {
    x.data
        .iter_mut()
        .map(|v| {
            let on = *v > T::zero();
            if !on {
                *v = T::zero();
            }
            on
        })
        .collect()
}

pub(crate) fn relu_backward<T: Element>(dy: &mut Tensor<T>, mask: &[bool]) {
    dy.data.iter_mut().zip(mask).for_each(|(g, &on)| {
        if !on {
            *g = T::zero()
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-definition convolution used as an oracle.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (ho, wo) = (conv.out_dim(x.h), conv.out_dim(x.w));
        let mut out = Tensor::zeros(x.n, conv.cout, ho, wo);
        for i in 0..x.n {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co]);
                        for ci in 0..conv.cin {
                            for ky in 0..conv.k {
                                for kx in 0..conv.k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value
                                        [((co * conv.cin + ci) * conv.k + ky) * conv.k + kx];
                                    acc += wv * x.channel(i, ci)[iy as usize * x.w + ix as usize];
                                }
                            }
                        }
                        out.channel_mut(i, co)[oy * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(2, 3, 9, 8, 1);
        for (k, s, p) in [(3, 1, 1), (2, 2, 0), (1, 1, 0), (1, 2, 0), (3, 2, 1)] {
            let mut conv = Conv2d::<f64>::new("c", 3, 4, k, s, p, true, 2.0, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn transposed_conv_doubles_and_places_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut up = ConvTranspose2x2::<f64>::new("u", 1, 1, &mut rng);
        up.weight.value = vec![1.0, 2.0, 3.0, 4.0];
        let x = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 10.0]);
        let y = up.forward(&x);
        assert_eq!(y.shape(), [1, 1, 2, 4]);
        assert_eq!(y.data, vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
    }

    #[test]
    fn instance_norm_closed_form() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![-1.0f64, 1.0, -1.0, 1.0]);
        let y = instance_normalize(&x, NORM_EPSILON);
        let expected = 1.0 / (1.0 + NORM_EPSILON).sqrt();
        for (v, s) in y.data.iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((v - s * expected).abs() < 1e-15);
        }
        let flat = Tensor::from_vec(1, 1, 2, 2, vec![0.7f64; 4]);
        assert!(instance_normalize(&flat, NORM_EPSILON).data.iter().all(|&v| v == 0.0));
    }
}
