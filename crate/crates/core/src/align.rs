//! Pixel-aligned 3D feature grids from sparse per-center point features.
//!
//! Point encoders emit features only for a subset of group centers. Each
//! point receives an inverse-distance blend of its nearest centers' features,
//! points are splatted onto the image grid through the given pixel
//! correspondences, and the sparse grid is smoothed (3x3 mean, no padding)
//! and resized back to the target resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{adaptive_avg_pool, avg_pool_3x3_valid, DenseFeatureMap};

/// Distances below this count as coincident with a center.
const COINCIDENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Number of nearest centers blended per point.
    pub k: usize,
    /// Inverse-distance exponent.
    pub power: f64,
    pub target_h: usize,
    pub target_w: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { k: 3, power: 1.0, target_h: 224, target_w: 224 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatureSet {
    pub centers: Vec<[f64; 3]>,
    /// `centers.len() x dim`, row-major.
    pub center_features: Vec<f64>,
    pub dim: usize,
    pub points: Vec<[f64; 3]>,
    /// Pixel `(y, x)` each point projects to, if any.
    pub correspondence: Vec<Option<(usize, usize)>>,
}

/// Per-point features, `n x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl PointFeatures {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl PointFeatureSet {
    pub fn center_feature(&self, c: usize) -> &[f64] {
        &self.center_features[c * self.dim..(c + 1) * self.dim]
    }

    fn check(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::contract("feature dimension must be positive"));
        }
        if self.center_features.len() != self.centers.len() * self.dim {
            return Err(Error::contract(format!(
                "center features length {} != {} centers x {}",
                self.center_features.len(),
                self.centers.len(),
                self.dim
            )));
        }
        if self.correspondence.len() != self.points.len() {
            return Err(Error::contract("one correspondence entry per point is required"));
        }
        Ok(())
    }

    /// Inverse-distance weighted blend of the `k` nearest center features for
    /// every point. A point coincident with a center copies that center's
    /// feature exactly.
    pub fn interpolate(&self, k: usize, power: f64) -> Result<PointFeatures> {
        self.check()?;
        if self.centers.is_empty() {
            return Err(Error::contract("interpolation needs at least one feature center"));
        }
        if k == 0 || k > self.centers.len() {
            return Err(Error::contract(format!(
                "k = {k} must lie in 1..={} centers",
                self.centers.len()
            )));
        }
        let d = self.dim;
        let mut values = vec![0.0; self.points.len() * d];
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(self.centers.len());
        for (i, p) in self.points.iter().enumerate() {
            order.clear();
            order.extend(self.centers.iter().enumerate().map(|(c, q)| (dist(p, q), c)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < order.len() {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            let nearest = &mut order[..k];
            nearest.sort_by(cmp);
            let out = &mut values[i * d..(i + 1) * d];
            if nearest[0].0 < COINCIDENT {
                out.copy_from_slice(self.center_feature(nearest[0].1));
                continue;
            }
            let total: f64 = nearest.iter().map(|(r, _)| r.powf(-power)).sum();
            for &(r, c) in nearest.iter() {
                let wgt = r.powf(-power) / total;
                for (o, f) in out.iter_mut().zip(self.center_feature(c)) {
                    *o += wgt * f;
                }
            }
        }
        Ok(PointFeatures { dim: d, values })
    }

    /// Averages point features into their corresponding pixels. Pixels with
    /// no point stay zero and invalid.
    pub fn project_to_grid(&self, features: &PointFeatures, h: usize, w: usize) -> Result<DenseFeatureMap> {
        self.check()?;
        if features.dim != self.dim || features.len() != self.points.len() {
            return Err(Error::contract("point features do not match the point set"));
        }
        let mut grid = DenseFeatureMap::zeros(h, w, self.dim, false);
        let mut counts = vec![0u32; h * w];
        for (i, corr) in self.correspondence.iter().enumerate() {
            let Some((y, x)) = *corr else { continue };
            if y >= h || x >= w {
                return Err(Error::contract(format!(
                    "point {i} maps to pixel ({y}, {x}) outside the {h}x{w} grid"
                )));
            }
            let p = y * w + x;
            counts[p] += 1;
            for (g, f) in grid.pixel_at_mut(p).iter_mut().zip(features.row(i)) {
                *g += f;
            }
        }
        for (p, &n) in counts.iter().enumerate() {
            if n > 0 {
                grid.pixel_at_mut(p).iter_mut().for_each(|g| *g /= f64::from(n));
                grid.validity_mut()[p] = true;
            }
        }
        Ok(grid)
    }

    /// Full alignment: interpolate, project at the target resolution, smooth
    /// and resize.
    pub fn align(&self, cfg: &AlignConfig) -> Result<DenseFeatureMap> {
        let feats = self.interpolate(cfg.k.min(self.centers.len()), cfg.power)?;
        let grid = self.project_to_grid(&feats, cfg.target_h, cfg.target_w)?;
        smooth_and_resize(&grid, cfg.target_h, cfg.target_w)
    }
}

/// 3x3 mean pooling without padding, then adaptive pooling to the target size.
pub fn smooth_and_resize(map: &DenseFeatureMap, target_h: usize, target_w: usize) -> Result<DenseFeatureMap> {
    let pooled = avg_pool_3x3_valid(map)?;
    adaptive_avg_pool(&pooled, target_h, target_w)
}
