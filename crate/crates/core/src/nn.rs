//! Small dense layers with hand-written backward passes.
//!
//! Activations are `(positions, channels)` matrices. Spatial layers take the
//! grid geometry separately and index positions row-major. Every layer's
//! backward accumulates parameter gradients into a same-shaped gradient
//! container (a zeroed clone of the layer) and returns the input gradient.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{SeededRng, EPS_NORM};

/// Layer-norm variance floor inside the square root.
pub const LN_EPS: f64 = 1e-5;
/// Rows whose variance falls below this normalize to the zero vector.
pub const LN_DEGENERATE_VAR: f64 = 1e-12;

/// Named access to trainable tensors, in a fixed traversal order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Extension helpers available on every parameter container.
pub trait ParametersExt: Parameters {
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// `(name, shape, len)` for every tensor.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, s, v| out.push((n.to_owned(), s.to_vec(), v.len())));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, v| v.fill(0.0));
        z
    }
}

impl<T: Parameters + ?Sized> ParametersExt for T {}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}
fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn xavier(rng: &mut SeededRng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.uniform_range(-a, a))
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(din: usize, dout: usize, rng: &mut SeededRng) -> Self {
        Self { w: xavier(rng, din, dout, din, dout), b: Array1::zeros(dout) }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Self { w: Array2::zeros((din, dout)), b: Array1::zeros(dout) }
    }

    pub fn din(&self) -> usize {
        self.w.nrows()
    }
    pub fn dout(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w"), self.w.shape(), slice2(&self.w));
        f(&join(prefix, "b"), self.b.shape(), slice1(&self.b));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w"), slice2_mut(&mut self.w));
        f(&join(prefix, "b"), slice1_mut(&mut self.b));
    }
}

// ---------------------------------------------------------------- activations

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + libm::erf(v * INV_SQRT2)))
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT2));
        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
        *d *= cdf + v * pdf;
    });
    dx
}

pub fn sigmoid(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward given the sigmoid *output*.
pub fn sigmoid_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &s| *d *= s * (1.0 - s));
    dx
}

// ---------------------------------------------------------------- layer norm

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    /// 0 for degenerate rows.
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            if var < LN_DEGENERATE_VAR {
                row.fill(0.0);
                inv_std.push(0.0);
            } else {
                let is = 1.0 / (var + LN_EPS).sqrt();
                row.mapv_inplace(|v| (v - mean) * is);
                inv_std.push(is);
            }
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (r, mut dxr) in dx.rows_mut().into_iter().enumerate() {
            let is = cache.inv_std[r];
            if is == 0.0 {
                continue;
            }
            let g = &dy.row(r) * &self.gamma;
            let xh = cache.xhat.row(r);
            let mean_g = g.sum() / d;
            let mean_gx = (&g * &xh).sum() / d;
            for i in 0..dxr.len() {
                dxr[i] = is * (g[i] - mean_g - xh[i] * mean_gx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "gamma"), self.gamma.shape(), slice1(&self.gamma));
        f(&join(prefix, "beta"), self.beta.shape(), slice1(&self.beta));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "gamma"), slice1_mut(&mut self.gamma));
        f(&join(prefix, "beta"), slice1_mut(&mut self.beta));
    }
}

// ---------------------------------------------------------------- pooling

/// Mean over non-overlapping `factor x factor` blocks of an `h x w` grid.
pub fn avg_pool2d(x: &Array2<f64>, h: usize, w: usize, factor: usize) -> Array2<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for y in 0..oh * factor {
        for xx in 0..ow * factor {
            let o = (y / factor) * ow + xx / factor;
            let mut orow = out.row_mut(o);
            orow.scaled_add(scale, &x.row(y * w + xx));
        }
    }
    out
}

pub fn avg_pool2d_backward(dy: &Array2<f64>, h: usize, w: usize, factor: usize) -> Array2<f64> {
    let ow = w / factor;
    let scale = 1.0 / (factor * factor) as f64;
    let mut dx = Array2::zeros((h * w, dy.ncols()));
    for y in 0..h {
        for xx in 0..w {
            let o = (y / factor) * ow + xx / factor;
            dx.row_mut(y * w + xx).scaled_add(scale, &dy.row(o));
        }
    }
    dx
}

/// Mean over non-overlapping runs of `factor` positions.
pub fn avg_pool1d(x: &Array2<f64>, factor: usize) -> Array2<f64> {
    let ol = x.nrows() / factor;
    let scale = 1.0 / factor as f64;
    let mut out = Array2::zeros((ol, x.ncols()));
    for l in 0..ol * factor {
        out.row_mut(l / factor).scaled_add(scale, &x.row(l));
    }
    out
}

pub fn avg_pool1d_backward(dy: &Array2<f64>, len: usize, factor: usize) -> Array2<f64> {
    let scale = 1.0 / factor as f64;
    let mut dx = Array2::zeros((len, dy.ncols()));
    for l in 0..len {
        dx.row_mut(l).scaled_add(scale, &dy.row(l / factor));
    }
    dx
}

// ---------------------------------------------------------------- transposed convolution

/// Padding that makes a transposed convolution upsample by exactly `stride`.
pub fn exact_padding(kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel < stride || (kernel - stride) % 2 != 0 {
        return Err(Error::contract(format!(
            "transposed conv geometry kernel={kernel} stride={stride} cannot upsample exactly"
        )));
    }
    Ok((kernel - stride) / 2)
}

/// 2D transposed convolution, output size `(h * stride, w * stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    /// `(cin, kernel * kernel * cout)`, column index `(ky * kernel + kx) * cout + co`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut SeededRng) -> Result<Self> {
        let padding = exact_padding(kernel, stride)?;
        let kk = kernel * kernel;
        Ok(Self {
            w: xavier(rng, cin, kk * cout, cin * kk, cout * kk),
            b: Array1::zeros(cout),
            kernel,
            stride,
            padding,
        })
    }

    pub fn cout(&self) -> usize {
        self.b.len()
    }

    fn out_index(&self, i: usize, k: usize, n_out: usize) -> Option<usize> {
        let o = (i * self.stride + k).checked_sub(self.padding)?;
        (o < n_out).then_some(o)
    }

    pub fn forward(&self, x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let (oh, ow) = (h * self.stride, w * self.stride);
        let co = self.cout();
        let k = self.kernel;
        let cols = x.dot(&self.w);
        let mut y = Array2::zeros((oh * ow, co));
        for iy in 0..h {
            for ix in 0..w {
                let col = cols.row(iy * w + ix);
                for ky in 0..k {
                    let Some(oy) = self.out_index(iy, ky, oh) else { continue };
                    for kx in 0..k {
                        let Some(ox) = self.out_index(ix, kx, ow) else { continue };
                        let base = (ky * k + kx) * co;
                        y.row_mut(oy * ow + ox).scaled_add(1.0, &col.slice(s![base..base + co]));
                    }
                }
            }
        }
        y + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, h: usize, w: usize, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let (oh, ow) = (h * self.stride, w * self.stride);
        let co = self.cout();
        let k = self.kernel;
        let mut dcols = Array2::zeros((h * w, k * k * co));
        for iy in 0..h {
            for ix in 0..w {
                let mut drow = dcols.row_mut(iy * w + ix);
                for ky in 0..k {
                    let Some(oy) = self.out_index(iy, ky, oh) else { continue };
                    for kx in 0..k {
                        let Some(ox) = self.out_index(ix, kx, ow) else { continue };
                        let base = (ky * k + kx) * co;
                        drow.slice_mut(s![base..base + co]).assign(&dy.row(oy * ow + ox));
                    }
                }
            }
        }
        grad.w += &x.t().dot(&dcols);
        grad.b += &dy.sum_axis(Axis(0));
        dcols.dot(&self.w.t())
    }
}

impl Parameters for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w"), self.w.shape(), slice2(&self.w));
        f(&join(prefix, "b"), self.b.shape(), slice1(&self.b));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w"), slice2_mut(&mut self.w));
        f(&join(prefix, "b"), slice1_mut(&mut self.b));
    }
}

/// 1D transposed convolution, output length `len * stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose1d {
    /// `(cin, kernel * cout)`, column index `k * cout + co`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut SeededRng) -> Result<Self> {
        let padding = exact_padding(kernel, stride)?;
        Ok(Self {
            w: xavier(rng, cin, kernel * cout, cin * kernel, cout * kernel),
            b: Array1::zeros(cout),
            kernel,
            stride,
            padding,
        })
    }

    pub fn cout(&self) -> usize {
        self.b.len()
    }

    fn out_index(&self, i: usize, k: usize, n_out: usize) -> Option<usize> {
        let o = (i * self.stride + k).checked_sub(self.padding)?;
        (o < n_out).then_some(o)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let len = x.nrows();
        let ol = len * self.stride;
        let co = self.cout();
        let cols = x.dot(&self.w);
        let mut y = Array2::zeros((ol, co));
        for i in 0..len {
            let col = cols.row(i);
            for k in 0..self.kernel {
                let Some(o) = self.out_index(i, k, ol) else { continue };
                y.row_mut(o).scaled_add(1.0, &col.slice(s![k * co..(k + 1) * co]));
            }
        }
        y + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let len = x.nrows();
        let ol = len * self.stride;
        let co = self.cout();
        let mut dcols = Array2::zeros((len, self.kernel * co));
        for i in 0..len {
            let mut drow = dcols.row_mut(i);
            for k in 0..self.kernel {
                let Some(o) = self.out_index(i, k, ol) else { continue };
                drow.slice_mut(s![k * co..(k + 1) * co]).assign(&dy.row(o));
            }
        }
        grad.w += &x.t().dot(&dcols);
        grad.b += &dy.sum_axis(Axis(0));
        dcols.dot(&self.w.t())
    }
}

impl Parameters for ConvTranspose1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w"), self.w.shape(), slice2(&self.w));
        f(&join(prefix, "b"), self.b.shape(), slice1(&self.b));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w"), slice2_mut(&mut self.w));
        f(&join(prefix, "b"), slice1_mut(&mut self.b));
    }
}

// ---------------------------------------------------------------- 1D convolution

/// Length-preserving 1D convolution (odd kernel, zero padding `kernel / 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `(kernel * cin, cout)`, row index `k * cin + ci`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::contract(format!("conv1d kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            w: xavier(rng, kernel * cin, cout, cin * kernel, cout * kernel),
            b: Array1::zeros(cout),
            kernel,
        })
    }

    pub fn cin(&self) -> usize {
        self.w.nrows() / self.kernel
    }

    fn im2col(&self, x: &Array2<f64>) -> Array2<f64> {
        let (len, ci) = x.dim();
        let pad = self.kernel / 2;
        let mut cols = Array2::zeros((len, self.kernel * ci));
        for l in 0..len {
            for k in 0..self.kernel {
                let Some(src) = (l + k).checked_sub(pad) else { continue };
                if src >= len {
                    continue;
                }
                cols.slice_mut(s![l, k * ci..(k + 1) * ci]).assign(&x.row(src));
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.im2col(x).dot(&self.w) + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let (len, ci) = x.dim();
        let pad = self.kernel / 2;
        grad.w += &self.im2col(x).t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.w.t());
        let mut dx = Array2::zeros((len, ci));
        for l in 0..len {
            for k in 0..self.kernel {
                let Some(src) = (l + k).checked_sub(pad) else { continue };
                if src >= len {
                    continue;
                }
                dx.row_mut(src).scaled_add(1.0, &dcols.slice(s![l, k * ci..(k + 1) * ci]));
            }
        }
        dx
    }
}

impl Parameters for Conv1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w"), self.w.shape(), slice2(&self.w));
        f(&join(prefix, "b"), self.b.shape(), slice1(&self.b));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w"), slice2_mut(&mut self.w));
        f(&join(prefix, "b"), slice1_mut(&mut self.b));
    }
}

// ---------------------------------------------------------------- windowed attention

/// Single-head softmax attention restricted to non-overlapping `window x window`
/// tiles of a token grid (edge tiles are clipped).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per window, aligned with `windows`.
    attn: Vec<Array2<f64>>,
    windows: Vec<Vec<usize>>,
}

/// Token indices of every window tile.
pub fn window_partition(h: usize, w: usize, window: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for wy in (0..h).step_by(window) {
        for wx in (0..w).step_by(window) {
            let mut idx = Vec::with_capacity(window * window);
            for y in wy..(wy + window).min(h) {
                for x in wx..(wx + window).min(w) {
                    idx.push(y * w + x);
                }
            }
            out.push(idx);
        }
    }
    out
}

fn gather(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

impl WindowAttention {
    pub fn new(dim: usize, window: usize, rng: &mut SeededRng) -> Self {
        Self {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            window,
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.q.dout() as f64).sqrt()
    }

    /// Attention output (without residual) for an `h x w` token grid.
    pub fn forward(&self, x: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, AttentionCache) {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let windows = window_partition(h, w, self.window);
        let mut out = Array2::zeros((x.nrows(), v.ncols()));
        let mut attn = Vec::with_capacity(windows.len());
        for idx in &windows {
            let (qw, kw, vw) = (gather(&q, idx), gather(&k, idx), gather(&v, idx));
            let mut a = qw.dot(&kw.t()) * self.scale();
            softmax_rows(&mut a);
            let o = a.dot(&vw);
            for (r, &t) in idx.iter().enumerate() {
                out.row_mut(t).assign(&o.row(r));
            }
            attn.push(a);
        }
        (out, AttentionCache { q, k, v, attn, windows })
    }

    pub fn backward(&self, x: &Array2<f64>, cache: &AttentionCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let sc = self.scale();
        for (idx, a) in cache.windows.iter().zip(&cache.attn) {
            let (qw, kw, vw) = (gather(&cache.q, idx), gather(&cache.k, idx), gather(&cache.v, idx));
            let dow = gather(dy, idx);
            let dvw = a.t().dot(&dow);
            let da = dow.dot(&vw.t());
            // softmax backward, row-wise
            let mut ds = da.clone();
            for r in 0..ds.nrows() {
                let dot: f64 = da.row(r).dot(&a.row(r));
                for c in 0..ds.ncols() {
                    ds[[r, c]] = a[[r, c]] * (da[[r, c]] - dot);
                }
            }
            let dqw = ds.dot(&kw) * sc;
            let dkw = ds.t().dot(&qw) * sc;
            for (r, &t) in idx.iter().enumerate() {
                dq.row_mut(t).assign(&dqw.row(r));
                dk.row_mut(t).assign(&dkw.row(r));
                dv.row_mut(t).assign(&dvw.row(r));
            }
        }
        let mut dx = self.q.backward(x, &dq, &mut grad.q);
        dx += &self.k.backward(x, &dk, &mut grad.k);
        dx += &self.v.backward(x, &dv, &mut grad.v);
        dx
    }
}

impl Parameters for WindowAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
    }
}

// ---------------------------------------------------------------- masked cosine loss

/// Mean over masked rows of `1 - cos(pred_i, target_i)` and its gradient with
/// respect to `pred`. Rows with a near-zero vector count as `cos = 0` and get
/// zero gradient. Returns `None` for the loss when no row is masked.
pub fn masked_cosine_rows(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    mask: &[bool],
    want_grad: bool,
) -> (Option<f64>, Option<Array2<f64>>) {
    let m = mask.iter().filter(|b| **b).count();
    let mut grad = want_grad.then(|| Array2::zeros(pred.raw_dim()));
    if m == 0 {
        return (None, grad);
    }
    let inv_m = 1.0 / m as f64;
    let mut total = 0.0;
    for (r, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let p = pred.row(r);
        let t = target.row(r);
        let np = p.dot(&p).sqrt();
        let nt = t.dot(&t).sqrt();
        if np < EPS_NORM || nt < EPS_NORM {
            total += 1.0;
            continue;
        }
        let cos = p.dot(&t) / (np * nt);
        total += 1.0 - cos;
        if let Some(g) = grad.as_mut() {
            let mut gr = g.row_mut(r);
            for i in 0..gr.len() {
                gr[i] = -inv_m * (t[i] / (np * nt) - cos * p[i] / (np * np));
            }
        }
    }
    (Some(total * inv_m), grad)
}

// ---------------------------------------------------------------- Adam

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, cfg: AdamConfig) -> Self {
        Self { cfg, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    /// One update of `params` in place. A non-finite gradient aborts before
    /// any state changes.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam expects {} parameters, got params={} grads={}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch: 0, detail: format!("non-finite gradient at index {i}") });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }

    /// Applies one update to a parameter container.
    pub fn step_params<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &P) -> Result<()> {
        let mut flat = model.flatten();
        self.step(&mut flat, &grads.flatten())?;
        model.assign_flat(&flat);
        Ok(())
    }
}
