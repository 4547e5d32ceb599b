//! Modality-specific reconstruction branches.
//!
//! 2D branch: per-pixel projection (linear, GELU, LayerNorm), 4x4 mean
//! downsampling to a latent grid, windowed self-attention with a residual,
//! a residual MLP refinement, then two stride-2 transposed convolutions back
//! to the input resolution and channel count.
//!
//! 3D branch: the grid is flattened row-major into a sequence. Per-position
//! projection (linear, GELU), mean downsampling by 4 along the sequence, two
//! stride-2 transposed 1D convolutions, and a gating block
//! `out = sigmoid(conv(gelu(conv(r)))) * r` over the upsampled pathway `r`.
//!
//! Both decoders zero their input at invalid pixels, so invalid features never
//! influence the reconstruction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapnet::gather_rows;
use crate::nn::{
    avg_pool1d, avg_pool1d_backward, avg_pool2d, avg_pool2d_backward, gelu, gelu_backward, join,
    masked_cosine_rows, sigmoid, sigmoid_backward, AttentionCache, Conv1d, ConvTranspose1d, ConvTranspose2d,
    LayerNorm, LayerNormCache, Linear, Parameters, ParametersExt, WindowAttention,
};
use crate::numcore::{DenseFeatureMap, SeededRng};
use crate::train::Trainable;

fn map_to_matrix(map: &DenseFeatureMap) -> Array2<f64> {
    let (vals, _) = map.masked().into_parts();
    Array2::from_shape_vec((map.num_pixels(), map.channels()), vals).expect("shape matches")
}

fn matrix_to_map(m: Array2<f64>, like: &DenseFeatureMap) -> Result<DenseFeatureMap> {
    let c = m.ncols();
    let vals = m.into_raw_vec_and_offset().0;
    DenseFeatureMap::new(like.height(), like.width(), c, vals, like.validity().to_vec())
}

// ---------------------------------------------------------------- 2D

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoder2DConfig {
    pub latent: usize,
    pub window: usize,
    /// Hidden width of the refinement MLP as a multiple of `latent`.
    pub mlp_ratio: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for Decoder2DConfig {
    fn default() -> Self {
        Self { latent: 128, window: 4, mlp_ratio: 2, kernel: 4, stride: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder2DModel {
    pub proj: Linear,
    pub proj_norm: LayerNorm,
    pub attn: WindowAttention,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub up1: ConvTranspose2d,
    pub up2: ConvTranspose2d,
}

pub struct Decoder2DCache {
    h: usize,
    w: usize,
    x0: Array2<f64>,
    a1: Array2<f64>,
    ln: LayerNormCache,
    z: Array2<f64>,
    attn: AttentionCache,
    t: Array2<f64>,
    m1: Array2<f64>,
    m2: Array2<f64>,
    r: Array2<f64>,
    u1: Array2<f64>,
    u2: Array2<f64>,
}

impl Decoder2DModel {
    pub fn new(channels: usize, cfg: &Decoder2DConfig, rng: &mut SeededRng) -> Result<Self> {
        if channels == 0 || cfg.latent == 0 || cfg.window == 0 || cfg.mlp_ratio == 0 {
            return Err(Error::Config("decoder2d dims must be positive".into()));
        }
        let c = cfg.latent;
        Ok(Self {
            proj: Linear::new(channels, c, rng),
            proj_norm: LayerNorm::new(c),
            attn: WindowAttention::new(c, cfg.window, rng),
            mlp_in: Linear::new(c, c * cfg.mlp_ratio, rng),
            mlp_out: Linear::new(c * cfg.mlp_ratio, c, rng),
            up1: ConvTranspose2d::new(c, c, cfg.kernel, cfg.stride, rng)?,
            up2: ConvTranspose2d::new(c, channels, cfg.kernel, cfg.stride, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj.din()
    }

    /// Total spatial reduction between input and latent grid.
    pub fn factor(&self) -> usize {
        self.up1.stride * self.up2.stride
    }

    fn check(&self, f: &DenseFeatureMap) -> Result<()> {
        if f.channels() != self.channels() {
            return Err(Error::contract(format!(
                "decoder2d expects {} channels, got {}",
                self.channels(),
                f.channels()
            )));
        }
        let k = self.factor();
        if f.height() % k != 0 || f.width() % k != 0 {
            return Err(Error::contract(format!(
                "decoder2d needs spatial dims divisible by {k}, got {}x{}",
                f.height(),
                f.width()
            )));
        }
        Ok(())
    }

    /// Zeroes the final stage so the decoder outputs all zeros.
    pub fn zero_final_stage(&mut self) {
        self.up2.w.fill(0.0);
        self.up2.b.fill(0.0);
    }

    pub fn forward_cached(&self, f: &DenseFeatureMap) -> Result<(Array2<f64>, Decoder2DCache)> {
        self.check(f)?;
        let (h, w) = (f.height(), f.width());
        let k = self.factor();
        let (lh, lw) = (h / k, w / k);
        let x0 = map_to_matrix(f);
        let a1 = self.proj.forward(&x0);
        let (a3, ln) = self.proj_norm.forward(&gelu(&a1));
        let z = avg_pool2d(&a3, h, w, k);
        let (att, attn) = self.attn.forward(&z, lh, lw);
        let t = &z + &att;
        let m1 = self.mlp_in.forward(&t);
        let m2 = gelu(&m1);
        let r = &t + &self.mlp_out.forward(&m2);
        let u1 = self.up1.forward(&r, lh, lw);
        let u2 = gelu(&u1);
        let out = self.up2.forward(&u2, lh * self.up1.stride, lw * self.up1.stride);
        Ok((out, Decoder2DCache { h, w, x0, a1, ln, z, attn, t, m1, m2, r, u1, u2 }))
    }

    /// Accumulates parameter gradients for upstream `dout`.
    pub fn backward(&self, c: &Decoder2DCache, dout: &Array2<f64>, g: &mut Self) {
        let k = self.factor();
        let (lh, lw) = (c.h / k, c.w / k);
        let (mh, mw) = (lh * self.up1.stride, lw * self.up1.stride);
        let du2 = self.up2.backward(&c.u2, mh, mw, dout, &mut g.up2);
        let du1 = gelu_backward(&c.u1, &du2);
        let dr = self.up1.backward(&c.r, lh, lw, &du1, &mut g.up1);
        // r = t + mlp_out(gelu(mlp_in(t)))
        let dm2 = self.mlp_out.backward(&c.m2, &dr, &mut g.mlp_out);
        let dm1 = gelu_backward(&c.m1, &dm2);
        let mut dt = self.mlp_in.backward(&c.t, &dm1, &mut g.mlp_in);
        dt += &dr;
        // t = z + attn(z)
        let mut dz = self.attn.backward(&c.z, &c.attn, &dt, &mut g.attn);
        dz += &dt;
        let da3 = avg_pool2d_backward(&dz, c.h, c.w, k);
        let da2 = self.proj_norm.backward(&c.ln, &da3, &mut g.proj_norm);
        let da1 = gelu_backward(&c.a1, &da2);
        let _ = self.proj.backward(&c.x0, &da1, &mut g.proj);
    }

    /// Refinement block alone: `t + mlp_out(gelu(mlp_in(t)))`.
    pub fn refine(&self, t: &Array2<f64>) -> Array2<f64> {
        t + &self.mlp_out.forward(&gelu(&self.mlp_in.forward(t)))
    }
}

impl Parameters for Decoder2DModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.proj_norm.visit(&join(prefix, "proj_norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.mlp_in.visit(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit(&join(prefix, "mlp_out"), f);
        self.up1.visit(&join(prefix, "up1"), f);
        self.up2.visit(&join(prefix, "up2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.proj_norm.visit_mut(&join(prefix, "proj_norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
        self.up1.visit_mut(&join(prefix, "up1"), f);
        self.up2.visit_mut(&join(prefix, "up2"), f);
    }
}

/// Reconstructs a 2D feature map; validity passes through unchanged.
pub fn decoder2d_forward(model: &Decoder2DModel, features: &DenseFeatureMap) -> Result<DenseFeatureMap> {
    let (out, _) = model.forward_cached(features)?;
    matrix_to_map(out, features)
}

// ---------------------------------------------------------------- 3D

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoder3DConfig {
    pub latent: usize,
    pub kernel: usize,
    pub stride: usize,
    pub gate_kernel: usize,
}

impl Default for Decoder3DConfig {
    fn default() -> Self {
        Self { latent: 128, kernel: 4, stride: 2, gate_kernel: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder3DModel {
    pub proj: Linear,
    pub up1: ConvTranspose1d,
    pub up2: ConvTranspose1d,
    pub gate1: Conv1d,
    pub gate2: Conv1d,
}

pub struct Decoder3DCache {
    x0: Array2<f64>,
    a1: Array2<f64>,
    z: Array2<f64>,
    u1: Array2<f64>,
    u2: Array2<f64>,
    r: Array2<f64>,
    g1: Array2<f64>,
    mask: Array2<f64>,
}

impl Decoder3DCache {
    /// Sigmoid gate values, `(positions, channels)`.
    pub fn gate(&self) -> &Array2<f64> {
        &self.mask
    }
    /// The upsampled pathway the gate multiplies.
    pub fn residual(&self) -> &Array2<f64> {
        &self.r
    }
}

impl Decoder3DModel {
    pub fn new(channels: usize, cfg: &Decoder3DConfig, rng: &mut SeededRng) -> Result<Self> {
        if channels == 0 || cfg.latent == 0 {
            return Err(Error::Config("decoder3d dims must be positive".into()));
        }
        let c = cfg.latent;
        Ok(Self {
            proj: Linear::new(channels, c, rng),
            up1: ConvTranspose1d::new(c, c, cfg.kernel, cfg.stride, rng)?,
            up2: ConvTranspose1d::new(c, channels, cfg.kernel, cfg.stride, rng)?,
            gate1: Conv1d::new(channels, channels, cfg.gate_kernel, rng)?,
            gate2: Conv1d::new(channels, channels, cfg.gate_kernel, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj.din()
    }

    pub fn factor(&self) -> usize {
        self.up1.stride * self.up2.stride
    }

    fn check(&self, f: &DenseFeatureMap) -> Result<()> {
        if f.channels() != self.channels() {
            return Err(Error::contract(format!(
                "decoder3d expects {} channels, got {}",
                self.channels(),
                f.channels()
            )));
        }
        if f.num_pixels() % self.factor() != 0 {
            return Err(Error::contract(format!(
                "decoder3d needs a sequence length divisible by {}, got {}",
                self.factor(),
                f.num_pixels()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, f: &DenseFeatureMap) -> Result<(Array2<f64>, Decoder3DCache)> {
        self.check(f)?;
        let x0 = map_to_matrix(f);
        let a1 = self.proj.forward(&x0);
        let z = avg_pool1d(&gelu(&a1), self.factor());
        let u1 = self.up1.forward(&z);
        let u2 = gelu(&u1);
        let r = self.up2.forward(&u2);
        let g1 = self.gate1.forward(&r);
        let g2 = self.gate2.forward(&gelu(&g1));
        let mask = sigmoid(&g2);
        let out = &mask * &r;
        Ok((out, Decoder3DCache { x0, a1, z, u1, u2, r, g1, mask }))
    }

    pub fn backward(&self, c: &Decoder3DCache, dout: &Array2<f64>, g: &mut Self) {
        // out = mask * r
        let dmask = dout * &c.r;
        let mut dr = dout * &c.mask;
        let dg2 = sigmoid_backward(&c.mask, &dmask);
        let dgelu1 = self.gate2.backward(&gelu(&c.g1), &dg2, &mut g.gate2);
        let dg1 = gelu_backward(&c.g1, &dgelu1);
        dr += &self.gate1.backward(&c.r, &dg1, &mut g.gate1);
        let du2 = self.up2.backward(&c.u2, &dr, &mut g.up2);
        let du1 = gelu_backward(&c.u1, &du2);
        let dz = self.up1.backward(&c.z, &du1, &mut g.up1);
        let da = avg_pool1d_backward(&dz, c.x0.nrows(), self.factor());
        let da1 = gelu_backward(&c.a1, &da);
        let _ = self.proj.backward(&c.x0, &da1, &mut g.proj);
    }
}

impl Parameters for Decoder3DModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.up1.visit(&join(prefix, "up1"), f);
        self.up2.visit(&join(prefix, "up2"), f);
        self.gate1.visit(&join(prefix, "gate1"), f);
        self.gate2.visit(&join(prefix, "gate2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.up1.visit_mut(&join(prefix, "up1"), f);
        self.up2.visit_mut(&join(prefix, "up2"), f);
        self.gate1.visit_mut(&join(prefix, "gate1"), f);
        self.gate2.visit_mut(&join(prefix, "gate2"), f);
    }
}

/// Reconstructs a 3D feature map via the flattened sequence path.
pub fn decoder3d_forward(model: &Decoder3DModel, features: &DenseFeatureMap) -> Result<DenseFeatureMap> {
    let (out, _) = model.forward_cached(features)?;
    matrix_to_map(out, features)
}

// ---------------------------------------------------------------- training

/// A self-reconstruction sample: the target is the input itself.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSample {
    pub features: DenseFeatureMap,
    /// Pixels that enter the loss (intersected with feature validity).
    pub mask: Vec<bool>,
}

impl DecoderSample {
    fn loss_pixels(&self) -> Result<Vec<usize>> {
        if self.mask.len() != self.features.num_pixels() {
            return Err(Error::contract("decoder mask does not match the spatial shape"));
        }
        Ok((0..self.mask.len()).filter(|&p| self.mask[p] && self.features.validity()[p]).collect())
    }
}

fn recon_loss(out: &Array2<f64>, sample: &DecoderSample, pixels: &[usize]) -> (f64, Array2<f64>) {
    let pred = out.select(ndarray::Axis(0), pixels);
    let target = gather_rows(&sample.features, pixels);
    let all = vec![true; pixels.len()];
    let (loss, dpred) = masked_cosine_rows(&pred, &target, &all, true);
    let dpred = dpred.expect("gradient requested");
    let mut dout = Array2::zeros(out.raw_dim());
    for (r, &p) in pixels.iter().enumerate() {
        dout.row_mut(p).assign(&dpred.row(r));
    }
    (loss.expect("nonempty"), dout)
}

/// Masked cosine self-reconstruction loss and parameter gradients.
pub fn decoder2d_backward(model: &Decoder2DModel, sample: &DecoderSample) -> Result<Option<(f64, Decoder2DModel)>> {
    let pixels = sample.loss_pixels()?;
    let (out, cache) = model.forward_cached(&sample.features)?;
    if pixels.is_empty() {
        return Ok(None);
    }
    let (loss, dout) = recon_loss(&out, sample, &pixels);
    let mut g = model.zeros_like();
    model.backward(&cache, &dout, &mut g);
    Ok(Some((loss, g)))
}

pub fn decoder3d_backward(model: &Decoder3DModel, sample: &DecoderSample) -> Result<Option<(f64, Decoder3DModel)>> {
    let pixels = sample.loss_pixels()?;
    let (out, cache) = model.forward_cached(&sample.features)?;
    if pixels.is_empty() {
        return Ok(None);
    }
    let (loss, dout) = recon_loss(&out, sample, &pixels);
    let mut g = model.zeros_like();
    model.backward(&cache, &dout, &mut g);
    Ok(Some((loss, g)))
}

impl Trainable<DecoderSample> for Decoder2DModel {
    fn loss_and_grad(&self, sample: &DecoderSample) -> Result<Option<(f64, Self)>> {
        decoder2d_backward(self, sample)
    }
}

impl Trainable<DecoderSample> for Decoder3DModel {
    fn loss_and_grad(&self, sample: &DecoderSample) -> Result<Option<(f64, Self)>> {
        decoder3d_backward(self, sample)
    }
}
