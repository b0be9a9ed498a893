use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::real::{matmul, Real};
use super::{Mode, Module, Param};
use crate::error::{Error, Result};

pub(crate) fn gaussian<T: Real, R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<T> {
    if std == 0.0 {
        return vec![T::zero(); n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

/// `y = x W + b` on `rows x in` inputs, `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Option<Param<T>>,
    pub in_dim: usize,
    pub out_dim: usize,
    cache: Option<(Vec<T>, usize)>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Self {
            w: Param::new(
                format!("{name}.weight"),
                &[in_dim, out_dim],
                gaussian(in_dim * out_dim, std, rng),
            ),
            b: bias.then(|| Param::zeros(format!("{name}.bias"), &[out_dim])),
            in_dim,
            out_dim,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &[T], rows: usize, mode: Mode) -> Vec<T> {
        let mut y = vec![T::zero(); rows * self.out_dim];
        if let Some(b) = &self.b {
            for row in y.chunks_exact_mut(self.out_dim) {
                row.copy_from_slice(&b.value);
            }
        }
        matmul(
            rows,
            self.in_dim,
            self.out_dim,
            x,
            false,
            &self.w.value,
            false,
            &mut y,
            T::one(),
        );
        self.cache = (mode == Mode::Train).then(|| (x.to_vec(), rows));
        y
    }

    pub fn backward(&mut self, dy: &[T]) -> Result<Vec<T>> {
        let (x, rows) = self.cache.take().ok_or(Error::MissingTrace)?;
        matmul(
            self.in_dim,
            rows,
            self.out_dim,
            &x,
            true,
            dy,
            false,
            &mut self.w.grad,
            T::one(),
        );
        if let Some(b) = &mut self.b {
            for row in dy.chunks_exact(self.out_dim) {
                for (g, &d) in b.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![T::zero(); rows * self.in_dim];
        matmul(
            rows,
            self.out_dim,
            self.in_dim,
            dy,
            false,
            &self.w.value,
            true,
            &mut dx,
            T::zero(),
        );
        Ok(dx)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// 2-D convolution with square kernel, symmetric zero padding and stride,
/// lowered to a matrix product per image.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `c_out x c_in x k x k`
    pub w: Param<T>,
    pub b: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvTrace<T>>,
}

#[derive(Clone, Debug)]
struct ConvTrace<T> {
    cols: Vec<T>,
    n: usize,
    h: usize,
    w: usize,
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            w: Param::new(
                format!("{name}.weight"),
                &[c_out, c_in, kernel, kernel],
                gaussian(c_out * fan_in, std, rng),
            ),
            b: Param::zeros(format!("{name}.bias"), &[c_out]),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |x: usize| (x + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn im2col(&self, img: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (ho, wo) = self.output_size(h, w);
        let l = ho * wo;
        let k = self.kernel;
        for c in 0..self.c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * l;
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            cols[row + oi * wo + oj] = if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                img[(c * h + ii as usize) * w + jj as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, img: &mut [T]) {
        let (ho, wo) = self.output_size(h, w);
        let l = ho * wo;
        let k = self.kernel;
        for c in 0..self.c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * l;
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && (jj as usize) < w {
                                img[(c * h + ii as usize) * w + jj as usize] += cols[row + oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `x` is `n x c_in x h x w`; returns `(y, h_out, w_out)`.
    pub fn forward(&mut self, x: &[T], n: usize, h: usize, w: usize, mode: Mode) -> (Vec<T>, usize, usize) {
        let (ho, wo) = self.output_size(h, w);
        let l = ho * wo;
        let ckk = self.c_in * self.kernel * self.kernel;
        let in_sz = self.c_in * h * w;
        let out_sz = self.c_out * l;
        let mut cols = vec![T::zero(); n * ckk * l];
        let mut y = vec![T::zero(); n * out_sz];
        for i in 0..n {
            let c = &mut cols[i * ckk * l..(i + 1) * ckk * l];
            self.im2col(&x[i * in_sz..(i + 1) * in_sz], h, w, c);
            let yi = &mut y[i * out_sz..(i + 1) * out_sz];
            for (o, row) in yi.chunks_exact_mut(l).enumerate() {
                row.iter_mut().for_each(|v| *v = self.b.value[o]);
            }
            matmul(self.c_out, ckk, l, &self.w.value, false, c, false, yi, T::one());
        }
        self.cache = (mode == Mode::Train).then_some(ConvTrace { cols, n, h, w });
        (y, ho, wo)
    }

    pub fn backward(&mut self, dy: &[T]) -> Result<Vec<T>> {
        let ConvTrace { cols, n, h, w } = self.cache.take().ok_or(Error::MissingTrace)?;
        let (ho, wo) = self.output_size(h, w);
        let l = ho * wo;
        let ckk = self.c_in * self.kernel * self.kernel;
        let in_sz = self.c_in * h * w;
        let out_sz = self.c_out * l;
        let mut dx = vec![T::zero(); n * in_sz];
        let mut dcols = vec![T::zero(); ckk * l];
        for i in 0..n {
            let dyi = &dy[i * out_sz..(i + 1) * out_sz];
            let ci = &cols[i * ckk * l..(i + 1) * ckk * l];
            matmul(self.c_out, l, ckk, dyi, false, ci, true, &mut self.w.grad, T::one());
            for (o, row) in dyi.chunks_exact(l).enumerate() {
                self.b.grad[o] += row.iter().copied().sum();
            }
            matmul(
                ckk,
                self.c_out,
                l,
                &self.w.value,
                true,
                dyi,
                false,
                &mut dcols,
                T::zero(),
            );
            self.col2im(&dcols, h, w, &mut dx[i * in_sz..(i + 1) * in_sz]);
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Per-channel normalization over the batch and spatial axes.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnTrace<T>>,
}

#[derive(Clone, Debug)]
struct BnTrace<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    hw: usize,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Param::zeros(format!("{name}.running_mean"), &[channels]),
            running_var: Param::filled(format!("{name}.running_var"), &[channels], T::one()),
            channels,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// `x` is `n x channels x hw`.
    pub fn forward(&mut self, x: &[T], n: usize, hw: usize, mode: Mode) -> Vec<T> {
        let c_len = self.channels;
        let m = n * hw;
        let mut y = vec![T::zero(); x.len()];
        let at = |i: usize, c: usize| (i * c_len + c) * hw;
        if mode == Mode::Eval {
            for c in 0..c_len {
                let inv = T::one() / (self.running_var.value[c] + T::of(self.eps)).sqrt();
                let (g, b, mu) = (self.gamma.value[c], self.beta.value[c], self.running_mean.value[c]);
                for i in 0..n {
                    let s = at(i, c);
                    for j in s..s + hw {
                        y[j] = g * (x[j] - mu) * inv + b;
                    }
                }
            }
            self.cache = None;
            return y;
        }
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c_len];
        let mom = T::of(self.momentum);
        for c in 0..c_len {
            let mut sum = 0.0f64;
            for i in 0..n {
                let s = at(i, c);
                sum += x[s..s + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / m as f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                let s = at(i, c);
                sq += x[s..s + hw].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            let (mean_t, inv_t) = (T::of(mean), T::of(inv));
            inv_std[c] = inv_t;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in 0..n {
                let s = at(i, c);
                for j in s..s + hw {
                    let xh = (x[j] - mean_t) * inv_t;
                    xhat[j] = xh;
                    y[j] = g * xh + b;
                }
            }
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            let rm = &mut self.running_mean.value[c];
            *rm = (T::one() - mom) * *rm + mom * mean_t;
            let rv = &mut self.running_var.value[c];
            *rv = (T::one() - mom) * *rv + mom * T::of(unbiased);
        }
        self.cache = Some(BnTrace { xhat, inv_std, n, hw });
        y
    }

    pub fn backward(&mut self, dy: &[T]) -> Result<Vec<T>> {
        let BnTrace { xhat, inv_std, n, hw } = self.cache.take().ok_or(Error::MissingTrace)?;
        let c_len = self.channels;
        let m = T::of((n * hw) as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for c in 0..c_len {
            let g = self.gamma.value[c];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for i in 0..n {
                let s = (i * c_len + c) * hw;
                for j in s..s + hw {
                    sum_d += dy[j];
                    sum_dx += dy[j] * xhat[j];
                }
            }
            self.gamma.grad[c] += sum_dx;
            self.beta.grad[c] += sum_d;
            // dxhat = g dy, so the sums scale by g.
            let k = g * inv_std[c] / m;
            for i in 0..n {
                let s = (i * c_len + c) * hw;
                for j in s..s + hw {
                    dx[j] = k * (m * dy[j] - sum_d - xhat[j] * sum_dx);
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, mut x: Vec<T>, mode: Mode) -> Vec<T> {
        let mut mask = Vec::new();
        if mode == Mode::Train {
            mask.reserve(x.len());
        }
        for v in x.iter_mut() {
            let on = *v > T::zero();
            if !on {
                *v = T::zero();
            }
            if mode == Mode::Train {
                mask.push(on);
            }
        }
        self.mask = (mode == Mode::Train).then_some(mask);
        x
    }

    pub fn backward<T: Real>(&mut self, mut dy: Vec<T>) -> Result<Vec<T>> {
        let mask = self.mask.take().ok_or(Error::MissingTrace)?;
        for (d, on) in dy.iter_mut().zip(mask) {
            if !on {
                *d = T::zero();
            }
        }
        Ok(dy)
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub p: f64,
    mask: Option<Vec<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, mut x: Vec<T>, mode: Mode, rng: &mut R) -> Vec<T> {
        if mode == Mode::Eval {
            self.mask = None;
            return x;
        }
        let mask: Vec<T> = if self.p > 0.0 {
            let keep = T::of(1.0 / (1.0 - self.p));
            (0..x.len())
                .map(|_| if rng.random::<f64>() < self.p { T::zero() } else { keep })
                .collect()
        } else {
            vec![T::one(); x.len()]
        };
        for (v, m) in x.iter_mut().zip(&mask) {
            *v *= *m;
        }
        self.mask = Some(mask);
        x
    }

    pub fn backward(&mut self, mut dy: Vec<T>) -> Result<Vec<T>> {
        let mask = self.mask.take().ok_or(Error::MissingTrace)?;
        for (d, m) in dy.iter_mut().zip(mask) {
            *d *= m;
        }
        Ok(dy)
    }
}

/// `ReLU(F(x) + R(x))` with `F = conv-BN-ReLU-conv-BN` and `R` the identity
/// or a strided 1x1 convolution, followed by dropout.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub skip: Option<Conv2d<T>>,
    relu1: Relu,
    relu_out: Relu,
    pub dropout: Dropout<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let skip = (stride != 1 || c_in != c_out)
            .then(|| Conv2d::new(&format!("{name}.skip"), c_in, c_out, 1, stride, 0, rng));
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), c_out),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), c_out),
            skip,
            relu1: Relu::new(),
            relu_out: Relu::new(),
            dropout: Dropout::new(dropout),
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: &[T],
        n: usize,
        h: usize,
        w: usize,
        mode: Mode,
        rng: &mut R,
    ) -> (Vec<T>, usize, usize) {
        let (a, ho, wo) = self.conv1.forward(x, n, h, w, mode);
        let a = self.bn1.forward(&a, n, ho * wo, mode);
        let a = self.relu1.forward(a, mode);
        let (a, _, _) = self.conv2.forward(&a, n, ho, wo, mode);
        let mut a = self.bn2.forward(&a, n, ho * wo, mode);
        match &mut self.skip {
            Some(s) => {
                let (r, _, _) = s.forward(x, n, h, w, mode);
                a.iter_mut().zip(r).for_each(|(v, r)| *v += r);
            }
            None => a.iter_mut().zip(x).for_each(|(v, &r)| *v += r),
        }
        let a = self.relu_out.forward(a, mode);
        (self.dropout.forward(a, mode, rng), ho, wo)
    }

    pub fn backward(&mut self, dy: Vec<T>) -> Result<Vec<T>> {
        let d = self.dropout.backward(dy)?;
        let d_sum = self.relu_out.backward(d)?;
        let g = self.bn2.backward(&d_sum)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu1.backward(g)?;
        let g = self.bn1.backward(&g)?;
        let mut dx = self.conv1.backward(&g)?;
        match &mut self.skip {
            Some(s) => {
                let ds = s.backward(&d_sum)?;
                dx.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
            }
            None => dx.iter_mut().zip(&d_sum).for_each(|(a, &b)| *a += b),
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(s) = &mut self.skip {
            s.visit_params(f);
        }
    }

    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }
}

/// Average pooling onto a fixed `out_h x out_w` grid; bin `i` spans
/// `floor(i H / out_h) .. ceil((i + 1) H / out_h)`.
#[derive(Clone, Debug)]
pub struct AdaptiveAvgPool2d {
    pub out_h: usize,
    pub out_w: usize,
    dims: Option<(usize, usize, usize)>,
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            dims: None,
        }
    }

    fn bins(len: usize, out: usize) -> Vec<(usize, usize)> {
        (0..out)
            .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
            .collect()
    }

    /// `x` is `planes x h x w` (planes = batch * channels).
    pub fn forward<T: Real>(&mut self, x: &[T], planes: usize, h: usize, w: usize, mode: Mode) -> Result<Vec<T>> {
        if h < self.out_h || w < self.out_w {
            return Err(Error::DimensionMismatch(format!(
                "feature map {h}x{w} is smaller than the pooling grid {}x{}",
                self.out_h, self.out_w
            )));
        }
        let (bh, bw) = (Self::bins(h, self.out_h), Self::bins(w, self.out_w));
        let mut y = vec![T::zero(); planes * self.out_h * self.out_w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for (i, &(r0, r1)) in bh.iter().enumerate() {
                for (j, &(c0, c1)) in bw.iter().enumerate() {
                    let mut s = T::zero();
                    for r in r0..r1 {
                        for c in c0..c1 {
                            s += src[r * w + c];
                        }
                    }
                    y[(p * self.out_h + i) * self.out_w + j] = s / T::of(((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        self.dims = (mode == Mode::Train).then_some((planes, h, w));
        Ok(y)
    }

    pub fn backward<T: Real>(&mut self, dy: &[T]) -> Result<Vec<T>> {
        let (planes, h, w) = self.dims.take().ok_or(Error::MissingTrace)?;
        let (bh, bw) = (Self::bins(h, self.out_h), Self::bins(w, self.out_w));
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for (i, &(r0, r1)) in bh.iter().enumerate() {
                for (j, &(c0, c1)) in bw.iter().enumerate() {
                    let g = dy[(p * self.out_h + i) * self.out_w + j] / T::of(((r1 - r0) * (c1 - c0)) as f64);
                    for r in r0..r1 {
                        for c in c0..c1 {
                            dst[r * w + c] += g;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Normalization over the last axis of a `rows x dim` matrix.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub dim: usize,
    pub eps: f64,
    cache: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[dim], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[dim]),
            dim,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &[T], mode: Mode) -> Vec<T> {
        let d = self.dim;
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + T::of(self.eps)).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                y[r * d + j] = self.gamma.value[j] * xh + self.beta.value[j];
            }
        }
        self.cache = (mode == Mode::Train).then_some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &[T]) -> Result<Vec<T>> {
        let (xhat, inv_std) = self.cache.take().ok_or(Error::MissingTrace)?;
        let d = self.dim;
        let dn = T::of(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxh = vec![T::zero(); d];
        for r in 0..dy.len() / d {
            let (dyr, xr) = (&dy[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                self.gamma.grad[j] += dyr[j] * xr[j];
                self.beta.grad[j] += dyr[j];
                dxh[j] = dyr[j] * self.gamma.value[j];
                s1 += dxh[j];
                s2 += dxh[j] * xr[j];
            }
            let k = inv_std[r] / dn;
            for j in 0..d {
                dx[r * d + j] = k * (dn * dxh[j] - s1 - xr[j] * s2);
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_gradient_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new("l", 3, 2, true, 1.0, &mut rng);
        let x = vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        lin.forward(&x, 2, Mode::Train);
        let dy = vec![1.0, -2.0, 0.5, 4.0];
        let dx = lin.backward(&dy).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                let expected = x[i] * dy[o] + x[3 + i] * dy[2 + o];
                assert!((lin.w.grad[i * 2 + o] - expected).abs() < 1e-12);
            }
        }
        assert_eq!(lin.b.as_ref().unwrap().grad, vec![1.5, 2.0]);
        let w = &lin.w.value;
        assert!((dx[0] - (w[0] * 1.0 + w[1] * -2.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_without_trace_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new("l", 2, 2, true, 1.0, &mut rng);
        lin.forward(&[1.0, 2.0], 1, Mode::Eval);
        assert!(matches!(lin.backward(&[1.0, 1.0]), Err(Error::MissingTrace)));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng);
        conv.b.value = vec![0.1, -0.2, 0.3];
        let (h, w) = (5, 6);
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let (y, ho, wo) = conv.forward(&x, 1, h, w, Mode::Eval);
        assert_eq!((ho, wo), (3, 3));
        for o in 0..3 {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = conv.b.value[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (ii, jj) = ((2 * i + ki) as isize - 1, (2 * j + kj) as isize - 1);
                                if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                                    s += conv.w.value[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * x[(c * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                    }
                    assert!((y[(o * ho + i) * wo + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stride_two_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rb = ResBlock::<f64>::new("r", 4, 8, 2, 0.0, &mut rng);
        let x = vec![0.5; 2 * 4 * 8 * 8];
        let (y, h, w) = rb.forward(&x, 2, 8, 8, Mode::Train, &mut rng);
        assert_eq!((h, w, y.len()), (4, 4, 2 * 8 * 16));
    }

    #[test]
    fn zero_branch_resblock_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rb = ResBlock::<f64>::new("r", 3, 3, 1, 0.0, &mut rng);
        rb.conv1.w.value.iter_mut().for_each(|v| *v = 0.0);
        rb.conv2.w.value.iter_mut().for_each(|v| *v = 0.0);
        let x: Vec<f64> = (0..2 * 3 * 16).map(|i| (i as f64 * 0.3).sin()).collect();
        let (y, _, _) = rb.forward(&x, 2, 4, 4, Mode::Train, &mut rng);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let x: Vec<f64> = (0..3 * 2 * 5).map(|i| (i as f64).powf(1.3)).collect();
        let y = bn.forward(&x, 3, 5, Mode::Train);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|i| y[(i * 2 + c) * 5..(i * 2 + c + 1) * 5].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 15.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value[0] > 0.0);
    }

    #[test]
    fn pool_bins_cover_input() {
        assert_eq!(AdaptiveAvgPool2d::bins(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(AdaptiveAvgPool2d::bins(5, 2), vec![(0, 3), (2, 5)]);
        let mut p = AdaptiveAvgPool2d::new(4, 4);
        assert!(p.forward(&[0.0f64; 9], 1, 3, 3, Mode::Eval).is_err());
    }

    #[test]
    fn layernorm_rows_standardized() {
        let mut ln = LayerNorm::<f64>::new("ln", 4);
        let y = ln.forward(&[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0], Mode::Eval);
        for row in y.chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
