//! Cross-modal mapping networks: a per-pixel MLP
//! `Linear -> [GELU -> LayerNorm] -> Linear` that predicts one modality's
//! feature from the other's.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, join, gelu_backward, masked_cosine_rows, LayerNorm, LayerNormCache, Linear, Parameters};
use crate::numcore::{DenseFeatureMap, SeededRng};
use crate::train::Trainable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    /// Hidden width; `None` means `max(d_in, d_out)`.
    pub hidden: Option<usize>,
    /// Number of GELU + LayerNorm blocks. Blocks after the first are preceded
    /// by a hidden-to-hidden linear layer.
    pub depth: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self { hidden: None, depth: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBlock {
    pub pre: Option<Linear>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperModel {
    pub input: Linear,
    pub blocks: Vec<HiddenBlock>,
    pub output: Linear,
}

struct BlockCache {
    pre_in: Option<Array2<f64>>,
    act_in: Array2<f64>,
    ln: LayerNormCache,
}

pub struct MapperCache {
    x: Array2<f64>,
    blocks: Vec<BlockCache>,
    out_in: Array2<f64>,
}

impl MapperModel {
    pub fn new(d_in: usize, d_out: usize, cfg: &MapperConfig, rng: &mut SeededRng) -> Result<Self> {
        if d_in == 0 || d_out == 0 || cfg.depth == 0 {
            return Err(Error::Config("mapper dims and depth must be positive".into()));
        }
        let h = cfg.hidden.unwrap_or(d_in.max(d_out));
        let input = Linear::new(d_in, h, rng);
        let blocks = (0..cfg.depth)
            .map(|i| HiddenBlock { pre: (i > 0).then(|| Linear::new(h, h, rng)), norm: LayerNorm::new(h) })
            .collect();
        let output = Linear::new(h, d_out, rng);
        Ok(Self { input, blocks, output })
    }

    pub fn d_in(&self) -> usize {
        self.input.din()
    }
    pub fn d_out(&self) -> usize {
        self.output.dout()
    }
    pub fn hidden(&self) -> usize {
        self.input.dout()
    }

    /// Row-wise forward over a `(pixels, d_in)` matrix.
    pub fn forward_rows(&self, x: &Array2<f64>) -> (Array2<f64>, MapperCache) {
        let mut h = self.input.forward(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let pre_in = b.pre.as_ref().map(|_| h.clone());
            if let Some(pre) = &b.pre {
                h = pre.forward(&h);
            }
            let act_in = h;
            let (y, ln) = b.norm.forward(&gelu(&act_in));
            blocks.push(BlockCache { pre_in, act_in, ln });
            h = y;
        }
        let y = self.output.forward(&h);
        (y, MapperCache { x: x.clone(), blocks, out_in: h })
    }

    /// Accumulates parameter gradients for upstream `dy` and returns `dx`.
    pub fn backward_rows(&self, cache: &MapperCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let mut d = self.output.backward(&cache.out_in, dy, &mut grad.output);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let g = &mut grad.blocks[i];
            d = b.norm.backward(&c.ln, &d, &mut g.norm);
            d = gelu_backward(&c.act_in, &d);
            if let (Some(pre), Some(pre_in)) = (&b.pre, &c.pre_in) {
                d = pre.backward(pre_in, &d, g.pre.as_mut().expect("gradient mirrors model"));
            }
        }
        self.input.backward(&cache.x, &d, &mut grad.input)
    }

    fn check_input(&self, features: &DenseFeatureMap) -> Result<()> {
        if features.channels() != self.d_in() {
            return Err(Error::contract(format!(
                "mapper expects {} input channels, got {}",
                self.d_in(),
                features.channels()
            )));
        }
        Ok(())
    }
}

impl Parameters for MapperModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(pre) = &b.pre {
                pre.visit(&join(prefix, &format!("block{i}.pre")), f);
            }
            b.norm.visit(&join(prefix, &format!("block{i}.norm")), f);
        }
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(pre) = &mut b.pre {
                pre.visit_mut(&join(prefix, &format!("block{i}.pre")), f);
            }
            b.norm.visit_mut(&join(prefix, &format!("block{i}.norm")), f);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Rows of `map` at `pixels`, as a `(pixels.len(), channels)` matrix.
pub(crate) fn gather_rows(map: &DenseFeatureMap, pixels: &[usize]) -> Array2<f64> {
    let c = map.channels();
    let mut out = Array2::zeros((pixels.len(), c));
    for (r, &p) in pixels.iter().enumerate() {
        out.row_mut(r).assign(&ndarray::ArrayView1::from(map.pixel_at(p)));
    }
    out
}

/// Maps every valid pixel independently. Invalid source pixels produce the
/// zero vector and stay invalid.
pub fn mapper_forward(model: &MapperModel, features: &DenseFeatureMap) -> Result<DenseFeatureMap> {
    model.check_input(features)?;
    let valid: Vec<usize> = (0..features.num_pixels()).filter(|&p| features.validity()[p]).collect();
    let mut out = DenseFeatureMap::zeros(features.height(), features.width(), model.d_out(), false);
    out.validity_mut().copy_from_slice(features.validity());
    if valid.is_empty() {
        return Ok(out);
    }
    let (y, _) = model.forward_rows(&gather_rows(features, &valid));
    for (r, &p) in valid.iter().enumerate() {
        out.pixel_at_mut(p).copy_from_slice(y.row(r).as_slice().expect("contiguous"));
    }
    Ok(out)
}

/// Result of a masked loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub masked_pixels: usize,
}

impl MaskedLoss {
    /// No pixel was selected by the mask.
    pub fn is_empty(&self) -> bool {
        self.masked_pixels == 0
    }
}

/// Mean over masked pixels of `1 - cos(pred, target)`; 0 with the empty flag
/// when the mask selects nothing.
pub fn masked_cosine_loss(pred: &DenseFeatureMap, target: &DenseFeatureMap, mask: &[bool]) -> Result<MaskedLoss> {
    if !pred.same_shape(target) {
        return Err(Error::contract(format!(
            "loss shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    if mask.len() != pred.num_pixels() {
        return Err(Error::contract("loss mask does not match the spatial shape"));
    }
    let pixels: Vec<usize> = (0..mask.len()).filter(|&p| mask[p]).collect();
    if pixels.is_empty() {
        return Ok(MaskedLoss { value: 0.0, masked_pixels: 0 });
    }
    let all = vec![true; pixels.len()];
    let (loss, _) = masked_cosine_rows(&gather_rows(pred, &pixels), &gather_rows(target, &pixels), &all, false);
    Ok(MaskedLoss { value: loss.unwrap_or(0.0), masked_pixels: pixels.len() })
}

/// One supervised pair for a mapping network.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperSample {
    pub source: DenseFeatureMap,
    pub target: DenseFeatureMap,
    /// Pixels that enter the loss.
    pub mask: Vec<bool>,
}

impl MapperSample {
    fn check(&self, model: &MapperModel) -> Result<()> {
        model.check_input(&self.source)?;
        let (s, t) = (&self.source, &self.target);
        if s.height() != t.height() || s.width() != t.width() || t.channels() != model.d_out() {
            return Err(Error::contract("mapper source/target shapes disagree"));
        }
        if self.mask.len() != s.num_pixels() {
            return Err(Error::contract("mapper mask does not match the spatial shape"));
        }
        Ok(())
    }
}

/// Loss and analytic parameter gradients of the masked cosine objective.
/// Masked-out pixels contribute exactly zero. Returns `None` for an empty mask.
pub fn mapper_backward(model: &MapperModel, sample: &MapperSample) -> Result<Option<(f64, MapperModel)>> {
    sample.check(model)?;
    let pixels: Vec<usize> = (0..sample.mask.len()).filter(|&p| sample.mask[p]).collect();
    if pixels.is_empty() {
        return Ok(None);
    }
    let src_valid: Vec<bool> = pixels.iter().map(|&p| sample.source.validity()[p]).collect();
    let (mut pred, cache) = model.forward_rows(&gather_rows(&sample.source, &pixels));
    for (r, &v) in src_valid.iter().enumerate() {
        if !v {
            pred.row_mut(r).fill(0.0);
        }
    }
    let target = gather_rows(&sample.target, &pixels);
    let all = vec![true; pixels.len()];
    let (loss, dpred) = masked_cosine_rows(&pred, &target, &all, true);
    let mut dpred = dpred.expect("gradient requested");
    for (r, &v) in src_valid.iter().enumerate() {
        if !v {
            dpred.row_mut(r).fill(0.0);
        }
    }
    let mut grad = crate::nn::ParametersExt::zeros_like(model);
    model.backward_rows(&cache, &dpred, &mut grad);
    Ok(Some((loss.expect("nonempty mask"), grad)))
}

impl Trainable<MapperSample> for MapperModel {
    fn loss_and_grad(&self, sample: &MapperSample) -> Result<Option<(f64, Self)>> {
        mapper_backward(self, sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParametersExt;
    use approx::assert_abs_diff_eq;

    fn random_map(h: usize, w: usize, c: usize, rng: &mut SeededRng) -> DenseFeatureMap {
        let vals = (0..h * w * c).map(|_| rng.normal()).collect();
        DenseFeatureMap::new(h, w, c, vals, vec![true; h * w]).unwrap()
    }

    #[test]
    fn invalid_pixels_map_to_zero() {
        let mut rng = SeededRng::new(1);
        let model = MapperModel::new(3, 2, &MapperConfig::default(), &mut rng).unwrap();
        let mut f = random_map(2, 2, 3, &mut rng);
        f.validity_mut()[1] = false;
        let out = mapper_forward(&model, &f).unwrap();
        assert_eq!(out.pixel_at(1), &[0.0, 0.0]);
        assert!(!out.validity()[1]);
        assert!(out.validity()[0]);
    }

    #[test]
    fn zero_output_projection_gives_zero_map() {
        let mut rng = SeededRng::new(2);
        let mut model = MapperModel::new(4, 3, &MapperConfig::default(), &mut rng).unwrap();
        model.output = Linear::zeros(model.hidden(), 3);
        let out = mapper_forward(&model, &random_map(3, 3, 4, &mut rng)).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_input_zero_biases_gives_near_zero_output() {
        let mut rng = SeededRng::new(3);
        let model = MapperModel::new(5, 5, &MapperConfig { hidden: Some(8), depth: 2 }, &mut rng).unwrap();
        let out = mapper_forward(&model, &DenseFeatureMap::zeros(2, 2, 5, true)).unwrap();
        assert!(crate::numcore::norm(out.values()) < 1e-6);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = SeededRng::new(4);
        let model = MapperModel::new(3, 2, &MapperConfig { hidden: Some(4), depth: 1 }, &mut rng).unwrap();
        let f = random_map(1, 1, 3, &mut rng);
        let x = f.pixel(0, 0);
        // input projection
        let mut h = vec![0.0; 4];
        for j in 0..4 {
            h[j] = model.input.b[j] + (0..3).map(|i| x[i] * model.input.w[[i, j]]).sum::<f64>();
        }
        // GELU then LayerNorm
        let g: Vec<f64> = h.iter().map(|v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()))).collect();
        let mean = g.iter().sum::<f64>() / 4.0;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let n: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + crate::nn::LN_EPS).sqrt() * model.blocks[0].norm.gamma[j] + model.blocks[0].norm.beta[j])
            .collect();
        let out = mapper_forward(&model, &f).unwrap();
        for k in 0..2 {
            let y = model.output.b[k] + (0..4).map(|j| n[j] * model.output.w[[j, k]]).sum::<f64>();
            assert_abs_diff_eq!(out.pixel(0, 0)[k], y, epsilon = 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = SeededRng::new(5);
        let a = random_map(3, 3, 2, &mut rng);
        let full = vec![true; 9];
        assert_abs_diff_eq!(masked_cosine_loss(&a, &a, &full).unwrap().value, 0.0, epsilon = 1e-12);
        let mut orth = a.clone();
        for p in 0..9 {
            let v = a.pixel_at(p).to_vec();
            orth.pixel_at_mut(p).copy_from_slice(&[-v[1], v[0]]);
        }
        assert_abs_diff_eq!(masked_cosine_loss(&a, &orth, &full).unwrap().value, 1.0, epsilon = 1e-12);
        let mut neg = a.clone();
        neg.values_mut().iter_mut().for_each(|v| *v = -*v);
        assert_abs_diff_eq!(masked_cosine_loss(&a, &neg, &full).unwrap().value, 2.0, epsilon = 1e-12);
        let empty = masked_cosine_loss(&a, &neg, &[false; 9]).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.value, 0.0);
        let b = random_map(3, 2, 2, &mut rng);
        assert!(masked_cosine_loss(&a, &b, &full).is_err());
    }

    #[test]
    fn empty_mask_has_no_gradient_and_single_pixel_is_its_own_mean() {
        let mut rng = SeededRng::new(6);
        let model = MapperModel::new(3, 3, &MapperConfig::default(), &mut rng).unwrap();
        let s = random_map(2, 2, 3, &mut rng);
        let t = random_map(2, 2, 3, &mut rng);
        let sample = MapperSample { source: s.clone(), target: t.clone(), mask: vec![false; 4] };
        assert!(mapper_backward(&model, &sample).unwrap().is_none());

        let mut mask = vec![false; 4];
        mask[2] = true;
        let (l, g) = mapper_backward(&model, &MapperSample { source: s.clone(), target: t.clone(), mask }).unwrap().unwrap();
        let one = MapperSample {
            source: DenseFeatureMap::new(1, 1, 3, s.pixel_at(2).to_vec(), vec![true]).unwrap(),
            target: DenseFeatureMap::new(1, 1, 3, t.pixel_at(2).to_vec(), vec![true]).unwrap(),
            mask: vec![true],
        };
        let (l1, g1) = mapper_backward(&model, &one).unwrap().unwrap();
        assert_abs_diff_eq!(l, l1, epsilon = 1e-15);
        for (a, b) in g.flatten().iter().zip(g1.flatten()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn pixel_permutation_permutes_output() {
        let mut rng = SeededRng::new(7);
        let model = MapperModel::new(3, 2, &MapperConfig::default(), &mut rng).unwrap();
        let f = random_map(1, 5, 3, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let mut vals = Vec::new();
        for &p in &perm {
            vals.extend_from_slice(f.pixel_at(p));
        }
        let g = DenseFeatureMap::new(1, 5, 3, vals, vec![true; 5]).unwrap();
        let (of, og) = (mapper_forward(&model, &f).unwrap(), mapper_forward(&model, &g).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(og.pixel_at(i), of.pixel_at(p));
        }
    }
}
