//! Anomaly scoring: per-pixel discrepancies, the reliability gate, confidence
//! weighted reconstruction, fusion variants and image-level scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{box_filter, normalized_distance_unchecked, AnomalyMap, DenseFeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Full, Variant::C1, Variant::C2, Variant::C3, Variant::C4, Variant::C5, Variant::C6];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::C1 => "c1",
            Variant::C2 => "c2",
            Variant::C3 => "c3",
            Variant::C4 => "c4",
            Variant::C5 => "c5",
            Variant::C6 => "c6",
        }
    }

    fn uses_gate(self) -> bool {
        matches!(self, Variant::Full | Variant::C1 | Variant::C4 | Variant::C5)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::contract(format!("unknown fusion variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Confidence temperature B.
    pub temperature: f64,
    pub eps: f64,
    pub gate_window: usize,
    pub gate_steepness: f64,
    /// Box-filter `(kernel, passes)` rounds applied in order.
    pub smoothing: Vec<(usize, usize)>,
    pub variant: Variant,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            eps: 1e-8,
            gate_window: 33,
            gate_steepness: 1.0,
            smoothing: vec![(3, 1), (5, 1)],
            variant: Variant::Full,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.gate_window % 2 == 0 {
            return Err(Error::Config(format!("gate window must be odd, got {}", self.gate_window)));
        }
        if !self.gate_steepness.is_finite() {
            return Err(Error::Config("gate steepness must be finite".into()));
        }
        if let Some(&(k, p)) = self.smoothing.iter().find(|(k, p)| k % 2 == 0 || *p == 0) {
            return Err(Error::Config(format!("smoothing round ({k}, {p}) needs an odd kernel and at least one pass")));
        }
        Ok(())
    }
}

/// The four per-pixel discrepancies, sharing one validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyBundle {
    pub d2d_map: AnomalyMap,
    pub d3d_map: AnomalyMap,
    pub d2d_rec: AnomalyMap,
    pub d3d_rec: AnomalyMap,
}

impl DiscrepancyBundle {
    pub fn new(d2d_map: AnomalyMap, d3d_map: AnomalyMap, d2d_rec: AnomalyMap, d3d_rec: AnomalyMap) -> Result<Self> {
        for m in [&d3d_map, &d2d_rec, &d3d_rec] {
            if !d2d_map.same_shape(m) || d2d_map.validity() != m.validity() {
                return Err(Error::contract("discrepancy maps must share shape and validity"));
            }
        }
        Ok(Self { d2d_map, d3d_map, d2d_rec, d3d_rec })
    }

    pub fn height(&self) -> usize {
        self.d2d_map.height()
    }
    pub fn width(&self) -> usize {
        self.d2d_map.width()
    }
    pub fn validity(&self) -> &[bool] {
        self.d2d_map.validity()
    }
}

fn distance_map(pred: &DenseFeatureMap, target: &DenseFeatureMap, validity: &[bool]) -> AnomalyMap {
    AnomalyMap::from_fn(target.height(), target.width(), validity, |p| {
        normalized_distance_unchecked(pred.pixel_at(p), target.pixel_at(p))
    })
}

/// Per-pixel normalized distances of the mapped and reconstructed features
/// against their targets. Validity follows `f3`.
pub fn discrepancy_maps(
    f2: &DenseFeatureMap,
    f3: &DenseFeatureMap,
    f2_map: &DenseFeatureMap,
    f3_map: &DenseFeatureMap,
    f2_rec: &DenseFeatureMap,
    f3_rec: &DenseFeatureMap,
) -> Result<DiscrepancyBundle> {
    let (h, w) = (f3.height(), f3.width());
    if f2.height() != h || f2.width() != w {
        return Err(Error::contract(format!("2D grid {}x{} differs from 3D grid {h}x{w}", f2.height(), f2.width())));
    }
    if !f2.same_shape(f2_map) || !f2.same_shape(f2_rec) {
        return Err(Error::contract("2D predictions must match the 2D feature shape"));
    }
    if !f3.same_shape(f3_map) || !f3.same_shape(f3_rec) {
        return Err(Error::contract("3D predictions must match the 3D feature shape"));
    }
    let valid = f3.validity();
    Ok(DiscrepancyBundle {
        d2d_map: distance_map(f2_map, f2, valid),
        d3d_map: distance_map(f3_map, f3, valid),
        d2d_rec: distance_map(f2_rec, f2, valid),
        d3d_rec: distance_map(f3_rec, f3, valid),
    })
}

fn zip_maps(a: &AnomalyMap, b: &AnomalyMap, f: impl Fn(f64, f64) -> f64) -> Result<AnomalyMap> {
    if !a.same_shape(b) {
        return Err(Error::contract("anomaly maps differ in shape"));
    }
    let validity: Vec<bool> = a.validity().iter().zip(b.validity()).map(|(x, y)| *x && *y).collect();
    let (sa, sb) = (a.scores(), b.scores());
    Ok(AnomalyMap::from_fn(a.height(), a.width(), &validity, |p| f(sa[p], sb[p])))
}

pub fn joint_mapping(d2d_map: &AnomalyMap, d3d_map: &AnomalyMap) -> Result<AnomalyMap> {
    zip_maps(d2d_map, d3d_map, |a, b| a * b)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Window standard deviations at or below this fraction of the window mean
/// count as zero contrast.
pub const GATE_DEGENERATE_REL_STD: f64 = 1e-12;

/// Mean and population standard deviation of the valid pixels in the clipped
/// `(2r+1)^2` window around `(y, x)`.
pub(crate) fn window_stats(map: &AnomalyMap, y: usize, x: usize, r: usize) -> (f64, f64) {
    let (h, w) = (map.height(), map.width());
    let (s, v) = (map.scores(), map.validity());
    let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
    let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
    let cells = || (y0..y1).flat_map(move |yy| (x0..x1).map(move |xx| yy * w + xx)).filter(|&q| v[q]);
    let (sum, n) = cells().fold((0.0, 0usize), |(a, n), q| (a + s[q], n + 1));
    let mean = sum / n as f64;
    let var = cells().map(|q| (s[q] - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Contrast gate `logistic(k (d - mean_W) / (std_W + eps))` over clipped
/// `window x window` neighborhoods of valid pixels. Invalid pixels get 0.
pub fn reliability_gate(d_joint: &AnomalyMap, window: usize, steepness: f64, eps: f64) -> Result<AnomalyMap> {
    if window % 2 == 0 {
        return Err(Error::contract(format!("gate window must be odd, got {window}")));
    }
    if d_joint.num_valid() == 0 {
        return Err(Error::EmptyImage);
    }
    let w = d_joint.width();
    let s = d_joint.scores();
    Ok(AnomalyMap::from_fn(d_joint.height(), w, d_joint.validity(), |p| {
        let (mean, sd) = window_stats(d_joint, p / w, p % w, window / 2);
        if sd <= GATE_DEGENERATE_REL_STD * mean.abs() {
            return 0.5;
        }
        logistic(steepness * (s[p] - mean) / (sd + eps))
    }))
}

pub fn gated_mapping_anomaly(alpha: &AnomalyMap, d_joint: &AnomalyMap) -> Result<AnomalyMap> {
    zip_maps(alpha, d_joint, |a, d| a * d)
}

fn weighted_rec(d2: f64, d3: f64, temperature: f64, eps: f64) -> f64 {
    let (w2, w3) = ((-temperature * d2).exp(), (-temperature * d3).exp());
    (w2 * d2 + w3 * d3) / (w2 + w3 + eps)
}

pub fn confidence_weighted_rec(d2d_rec: &AnomalyMap, d3d_rec: &AnomalyMap, temperature: f64, eps: f64) -> Result<AnomalyMap> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    zip_maps(d2d_rec, d3d_rec, |a, b| weighted_rec(a, b, temperature, eps))
}

/// Softmax(-a, -b) weighted combination of `(a, b)`.
pub fn soft_combine(a: f64, b: f64) -> f64 {
    let m = (-a).max(-b);
    let (ea, eb) = ((-a - m).exp(), (-b - m).exp());
    (ea * a + eb * b) / (ea + eb)
}

/// Raw (unsmoothed) anomaly map for `cfg.variant`.
pub fn fuse(bundle: &DiscrepancyBundle, cfg: &FusionConfig) -> Result<AnomalyMap> {
    fuse_with_gate(bundle, cfg, None)
}

/// As [`fuse`], with the gate supplied by the caller instead of computed from
/// the joint mapping discrepancy.
pub fn fuse_with_gate(bundle: &DiscrepancyBundle, cfg: &FusionConfig, gate: Option<&AnomalyMap>) -> Result<AnomalyMap> {
    let variant = cfg.variant;
    let d_joint = joint_mapping(&bundle.d2d_map, &bundle.d3d_map)?;
    let alpha = match (gate, variant.uses_gate()) {
        (Some(g), _) => {
            if !g.same_shape(&d_joint) {
                return Err(Error::contract("gate shape differs from the discrepancy maps"));
            }
            g.clone()
        }
        (None, true) => reliability_gate(&d_joint, cfg.gate_window, cfg.gate_steepness, cfg.eps)?,
        (None, false) => AnomalyMap::zeros(d_joint.height(), d_joint.width(), d_joint.validity().to_vec()),
    };
    let (m2, m3) = (bundle.d2d_map.scores(), bundle.d3d_map.scores());
    let (r2, r3) = (bundle.d2d_rec.scores(), bundle.d3d_rec.scores());
    let (a, j) = (alpha.scores(), d_joint.scores());
    let (t, eps) = (cfg.temperature, cfg.eps);
    Ok(AnomalyMap::from_fn(bundle.height(), bundle.width(), bundle.validity(), |p| match variant {
        Variant::Full => a[p] * j[p] * weighted_rec(r2[p], r3[p], t, eps),
        Variant::C1 => a[p] * j[p] * r2[p] * r3[p],
        Variant::C2 => m2[p] * m3[p] * r2[p] * r3[p],
        Variant::C3 => soft_combine(m2[p], m3[p]) * soft_combine(r2[p], r3[p]),
        Variant::C4 => soft_combine(m2[p], m3[p]) * a[p] * r2[p] * r3[p],
        Variant::C5 => a[p] * j[p] * a[p] * r2[p] * r3[p],
        Variant::C6 => (m2[p] + m3[p] + r2[p] + r3[p]) / 4.0,
    }))
}

/// Applies the smoothing schedule. Kernels larger than the map shrink to the
/// largest odd size that fits.
pub fn smooth(map: &AnomalyMap, schedule: &[(usize, usize)]) -> Result<AnomalyMap> {
    let fit = map.height().min(map.width());
    if fit == 0 {
        return Err(Error::EmptyImage);
    }
    let mut out = map.clone();
    for &(kernel, passes) in schedule {
        let k = if kernel > fit { fit - (1 - fit % 2) } else { kernel };
        out = box_filter(&out, k, passes)?;
    }
    Ok(out)
}

/// Smooths, divides by `sqrt(mean_valid + eps)` and returns the normalized map
/// with its image score (the valid maximum).
pub fn finalize(psi_raw: &AnomalyMap, cfg: &FusionConfig) -> Result<(AnomalyMap, f64)> {
    if psi_raw.num_valid() == 0 {
        return Err(Error::EmptyImage);
    }
    let smoothed = smooth(psi_raw, &cfg.smoothing)?;
    let mean = smoothed.mean_valid().ok_or(Error::EmptyImage)?;
    let normalized = smoothed.scaled(1.0 / (mean + cfg.eps).sqrt());
    let score = normalized.max_valid().ok_or(Error::EmptyImage)?;
    Ok((normalized, score))
}

fn infer_single(f: &DenseFeatureMap, f_rec: &DenseFeatureMap, cfg: &FusionConfig) -> Result<(AnomalyMap, f64)> {
    if !f.same_shape(f_rec) {
        return Err(Error::contract("reconstruction must match the feature shape"));
    }
    if f.num_valid() == 0 {
        return Err(Error::EmptyImage);
    }
    let raw = distance_map(f_rec, f, f.validity());
    let smoothed = smooth(&raw, &cfg.smoothing)?;
    let score = smoothed.max_valid().ok_or(Error::EmptyImage)?;
    Ok((smoothed, score))
}

/// 3D-only scoring: smoothed reconstruction distance and its plain maximum.
pub fn infer_3d_only(f3: &DenseFeatureMap, f3_rec: &DenseFeatureMap, cfg: &FusionConfig) -> Result<(AnomalyMap, f64)> {
    infer_single(f3, f3_rec, cfg)
}

/// 2D-only scoring, the appearance counterpart of [`infer_3d_only`].
pub fn infer_2d_only(f2: &DenseFeatureMap, f2_rec: &DenseFeatureMap, cfg: &FusionConfig) -> Result<(AnomalyMap, f64)> {
    infer_single(f2, f2_rec, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{normalized_distance, SeededRng};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, s: Vec<f64>) -> AnomalyMap {
        AnomalyMap::new(h, w, s, vec![true; h * w]).unwrap()
    }

    fn random_map(h: usize, w: usize, rng: &mut SeededRng, valid_p: f64) -> AnomalyMap {
        let v: Vec<bool> = (0..h * w).map(|i| i == 0 || rng.uniform() < valid_p).collect();
        AnomalyMap::new(h, w, (0..h * w).map(|_| 2.0 * rng.uniform()).collect(), v).unwrap()
    }

    fn random_bundle(h: usize, w: usize, rng: &mut SeededRng) -> DiscrepancyBundle {
        let first = random_map(h, w, rng, 0.8);
        let v = first.validity().to_vec();
        let mut next = || AnomalyMap::new(h, w, (0..h * w).map(|_| 2.0 * rng.uniform()).collect(), v.clone()).unwrap();
        let (b, c, d) = (next(), next(), next());
        DiscrepancyBundle::new(first, b, c, d).unwrap()
    }

    fn uniform_bundle(h: usize, w: usize, vals: [f64; 4]) -> DiscrepancyBundle {
        let m = |c: f64| map(h, w, vec![c; h * w]);
        DiscrepancyBundle::new(m(vals[0]), m(vals[1]), m(vals[2]), m(vals[3])).unwrap()
    }

    fn random_features(h: usize, w: usize, c: usize, rng: &mut SeededRng) -> DenseFeatureMap {
        DenseFeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.normal()).collect(), vec![true; h * w]).unwrap()
    }

    #[test]
    fn perfect_predictions_give_zero_discrepancy() {
        let mut rng = SeededRng::new(1);
        let f2 = random_features(3, 4, 5, &mut rng);
        let f3 = random_features(3, 4, 2, &mut rng);
        let b = discrepancy_maps(&f2, &f3, &f2, &f3, &f2, &f3).unwrap();
        for m in [&b.d2d_map, &b.d3d_map, &b.d2d_rec, &b.d3d_rec] {
            assert!(m.scores().iter().all(|&s| s.abs() < 1e-12));
        }
    }

    #[test]
    fn antipodal_prediction_scores_two() {
        let mut rng = SeededRng::new(2);
        let f2 = random_features(2, 2, 3, &mut rng);
        let f3 = random_features(2, 2, 3, &mut rng);
        let mut neg = f3.clone();
        neg.pixel_at_mut(3).iter_mut().for_each(|v| *v = -*v);
        let b = discrepancy_maps(&f2, &f3, &f2, &neg, &f2, &f3).unwrap();
        assert_abs_diff_eq!(b.d3d_map.scores()[3], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.d3d_map.scores()[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn discrepancies_match_pixel_loop() {
        let mut rng = SeededRng::new(3);
        let f2 = random_features(4, 3, 5, &mut rng);
        let mut f3 = random_features(4, 3, 2, &mut rng);
        f3.validity_mut()[5] = false;
        let p = [0, 1, 2, 3].map(|i| random_features(4, 3, if i % 2 == 0 { 5 } else { 2 }, &mut rng));
        let b = discrepancy_maps(&f2, &f3, &p[0], &p[1], &p[2], &p[3]).unwrap();
        for q in 0..12 {
            let valid = q != 5;
            let oracle = |a: &DenseFeatureMap, t: &DenseFeatureMap| {
                if valid { normalized_distance(a.pixel_at(q), t.pixel_at(q)).unwrap() } else { 0.0 }
            };
            assert_abs_diff_eq!(b.d2d_map.scores()[q], oracle(&p[0], &f2), epsilon = 1e-12);
            assert_abs_diff_eq!(b.d3d_map.scores()[q], oracle(&p[1], &f3), epsilon = 1e-12);
            assert_abs_diff_eq!(b.d2d_rec.scores()[q], oracle(&p[2], &f2), epsilon = 1e-12);
            assert_abs_diff_eq!(b.d3d_rec.scores()[q], oracle(&p[3], &f3), epsilon = 1e-12);
        }
    }

    #[test]
    fn discrepancy_shape_mismatch_is_rejected() {
        let mut rng = SeededRng::new(4);
        let f2 = random_features(3, 3, 2, &mut rng);
        let f3 = random_features(3, 4, 2, &mut rng);
        assert!(matches!(discrepancy_maps(&f2, &f3, &f2, &f3, &f2, &f3), Err(Error::Contract(_))));
    }

    #[test]
    fn joint_mapping_examples() {
        let j = joint_mapping(&map(1, 2, vec![0.5, 0.0]), &map(1, 2, vec![0.4, 1.7])).unwrap();
        assert_abs_diff_eq!(j.scores()[0], 0.2, epsilon = 1e-15);
        assert_eq!(j.scores()[1], 0.0);
    }

    #[test]
    fn constant_joint_map_gates_at_half() {
        let g = reliability_gate(&map(7, 9, vec![0.37; 63]), 33, 1.0, 1e-8).unwrap();
        for &a in g.scores() {
            assert_abs_diff_eq!(a, 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn outlier_pixel_saturates_gate() {
        let mut s = vec![0.01; 25 * 25];
        s[12 * 25 + 12] = 1.9;
        let g = reliability_gate(&map(25, 25, s), 33, 20.0, 1e-8).unwrap();
        assert!(g.get(12, 12) > 0.999);
    }

    /// Direct evaluation of the clipped-window statistics.
    fn gate_oracle(d: &AnomalyMap, window: usize, k: f64, eps: f64) -> Vec<f64> {
        let (h, w, r) = (d.height(), d.width(), window / 2);
        (0..h * w)
            .map(|p| {
                if !d.validity()[p] {
                    return 0.0;
                }
                let (y, x) = ((p / w) as i64, (p % w) as i64);
                let mut vals = Vec::new();
                for yy in 0..h as i64 {
                    for xx in 0..w as i64 {
                        let q = yy as usize * w + xx as usize;
                        if (yy - y).abs() <= r as i64 && (xx - x).abs() <= r as i64 && d.validity()[q] {
                            vals.push(d.scores()[q]);
                        }
                    }
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                if sd <= 1e-12 * mean.abs() {
                    return 0.5;
                }
                1.0 / (1.0 + (-k * (d.scores()[p] - mean) / (sd + eps)).exp())
            })
            .collect()
    }

    #[test]
    fn bright_pixel_gate_matches_window_oracle() {
        let mut s = vec![0.1; 25];
        s[12] = 1.0;
        let d = map(5, 5, s);
        let g = reliability_gate(&d, 3, 1.0, 1e-8).unwrap();
        for (a, o) in g.scores().iter().zip(gate_oracle(&d, 3, 1.0, 1e-8)) {
            assert_abs_diff_eq!(*a, o, epsilon = 1e-12);
        }
        // Centre: window of 9 with one 1.0 and eight 0.1.
        let mean: f64 = 1.8 / 9.0;
        let sd = ((0.8f64.powi(2) + 8.0 * 0.1f64.powi(2)) / 9.0).sqrt();
        assert_abs_diff_eq!(g.get(2, 2), logistic((1.0 - mean) / (sd + 1e-8)), epsilon = 1e-12);
    }

    #[test]
    fn random_gates_match_window_oracle() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let (h, w) = (1 + rng.below(9), 1 + rng.below(9));
            let d = random_map(h, w, &mut rng, 0.7);
            let window = [1, 3, 5, 33][rng.below(4)];
            let k = rng.uniform_range(0.2, 3.0);
            let g = reliability_gate(&d, window, k, 1e-8).unwrap();
            for (a, o) in g.scores().iter().zip(gate_oracle(&d, window, k, 1e-8)) {
                assert_abs_diff_eq!(*a, o, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gate_needs_valid_pixels() {
        let d = AnomalyMap::zeros(3, 3, vec![false; 9]);
        assert!(matches!(reliability_gate(&d, 3, 1.0, 1e-8), Err(Error::EmptyImage)));
    }

    #[test]
    fn gated_mapping_examples() {
        let d = map(1, 3, vec![0.3, 1.2, 0.0]);
        let zero = gated_mapping_anomaly(&map(1, 3, vec![0.0; 3]), &d).unwrap();
        assert!(zero.scores().iter().all(|&v| v == 0.0));
        assert_eq!(gated_mapping_anomaly(&map(1, 3, vec![1.0; 3]), &d).unwrap().scores(), d.scores());
    }

    #[test]
    fn confidence_weighting_examples() {
        let a = |d2: f64, d3: f64| {
            confidence_weighted_rec(&map(1, 1, vec![d2]), &map(1, 1, vec![d3]), 0.3, 1e-8).unwrap().scores()[0]
        };
        assert_eq!(a(0.0, 0.0), 0.0);
        let w = (-0.3f64 * 0.8).exp();
        assert_abs_diff_eq!(a(0.8, 0.8), 0.8 * 2.0 * w / (2.0 * w + 1e-8), epsilon = 1e-15);
        let oracle = ((-0.3f64).exp() + 2.0 * (-0.6f64).exp()) / ((-0.3f64).exp() + (-0.6f64).exp());
        assert_abs_diff_eq!(a(1.0, 2.0), oracle, epsilon = 1e-7);
        assert_abs_diff_eq!(a(1.0, 2.0), 1.4256, epsilon = 5e-5);
    }

    #[test]
    fn zero_bundle_fuses_to_zero_for_every_variant() {
        let b = uniform_bundle(4, 4, [0.0; 4]);
        for v in Variant::ALL {
            let cfg = FusionConfig { variant: v, ..Default::default() };
            assert!(fuse(&b, &cfg).unwrap().scores().iter().all(|&s| s == 0.0), "{v}");
        }
    }

    #[test]
    fn variant_pixel_examples() {
        let b = uniform_bundle(3, 3, [0.1, 0.2, 0.3, 0.4]);
        let c6 = fuse(&b, &FusionConfig { variant: Variant::C6, ..Default::default() }).unwrap();
        assert_abs_diff_eq!(c6.scores()[4], 0.25, epsilon = 1e-15);
        let soft = soft_combine(1.0, 3.0);
        assert_abs_diff_eq!(soft, ((-1f64).exp() + 3.0 * (-3f64).exp()) / ((-1f64).exp() + (-3f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(soft, 1.23841, epsilon = 5e-6);
        let b = uniform_bundle(3, 3, [1.0, 3.0, 0.5, 0.5]);
        let c3 = fuse(&b, &FusionConfig { variant: Variant::C3, ..Default::default() }).unwrap();
        assert_abs_diff_eq!(c3.scores()[4], soft * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn variants_follow_their_formulas_with_fixed_gate() {
        let mut rng = SeededRng::new(6);
        let b = random_bundle(5, 6, &mut rng);
        let gate = random_map(5, 6, &mut rng, 1.0);
        let gate = AnomalyMap::new(5, 6, gate.scores().iter().map(|v| v / 2.0).collect(), b.validity().to_vec()).unwrap();
        for v in Variant::ALL {
            let cfg = FusionConfig { variant: v, ..Default::default() };
            let out = fuse_with_gate(&b, &cfg, Some(&gate)).unwrap();
            for p in 0..30 {
                let (m2, m3, r2, r3) =
                    (b.d2d_map.scores()[p], b.d3d_map.scores()[p], b.d2d_rec.scores()[p], b.d3d_rec.scores()[p]);
                let a = gate.scores()[p];
                let (w2, w3) = ((-0.3 * r2).exp(), (-0.3 * r3).exp());
                let expect = if !b.validity()[p] {
                    0.0
                } else {
                    match v {
                        Variant::Full => a * m2 * m3 * (w2 * r2 + w3 * r3) / (w2 + w3 + 1e-8),
                        Variant::C1 => a * m2 * m3 * r2 * r3,
                        Variant::C2 => m2 * m3 * r2 * r3,
                        Variant::C3 => soft_combine(m2, m3) * soft_combine(r2, r3),
                        Variant::C4 => soft_combine(m2, m3) * a * r2 * r3,
                        Variant::C5 => a * a * m2 * m3 * r2 * r3,
                        Variant::C6 => (m2 + m3 + r2 + r3) / 4.0,
                    }
                };
                assert_abs_diff_eq!(out.scores()[p], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("c7".parse::<Variant>(), Err(Error::Contract(_))));
    }

    #[test]
    fn finalize_examples() {
        let cfg = FusionConfig { eps: 1e-300, ..Default::default() };
        let (_, s) = finalize(&map(6, 6, vec![0.49; 36]), &cfg).unwrap();
        assert_abs_diff_eq!(s, 0.7, epsilon = 1e-12);
        let (m, s) = finalize(&map(6, 6, vec![0.0; 36]), &FusionConfig::default()).unwrap();
        assert_eq!(s, 0.0);
        assert!(m.scores().iter().all(|&v| v == 0.0));
        let empty = AnomalyMap::zeros(3, 3, vec![false; 9]);
        assert!(matches!(finalize(&empty, &cfg), Err(Error::EmptyImage)));
    }

    #[test]
    fn finalize_is_smooth_then_normalize_then_max() {
        let mut rng = SeededRng::new(7);
        let raw = random_map(7, 8, &mut rng, 0.8);
        let cfg = FusionConfig::default();
        let (m, s) = finalize(&raw, &cfg).unwrap();
        let sm = box_filter(&box_filter(&raw, 3, 1).unwrap(), 5, 1).unwrap();
        let mean = sm.valid_scores().sum::<f64>() / sm.num_valid() as f64;
        let norm: Vec<f64> = sm.scores().iter().map(|v| v / (mean + 1e-8).sqrt()).collect();
        for (a, b) in m.scores().iter().zip(&norm) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        let max = norm.iter().zip(raw.validity()).filter(|(_, v)| **v).map(|(x, _)| *x).fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(s, max, epsilon = 1e-12);
    }

    #[test]
    fn oversized_kernels_shrink_to_fit() {
        let raw = map(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let sm = smooth(&raw, &[(5, 1)]).unwrap();
        assert_eq!(sm.scores(), raw.scores());
        let sm = smooth(&map(3, 4, vec![1.0; 12]), &[(5, 2)]).unwrap();
        assert!(sm.scores().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn three_d_only_examples() {
        let mut rng = SeededRng::new(8);
        let f3 = random_features(5, 5, 3, &mut rng);
        let cfg = FusionConfig { smoothing: vec![], ..Default::default() };
        let (m, s) = infer_3d_only(&f3, &f3, &cfg).unwrap();
        assert!(s.abs() < 1e-12 && m.scores().iter().all(|v| v.abs() < 1e-12));
        let mut rec = f3.clone();
        rec.pixel_at_mut(7).iter_mut().for_each(|v| *v = -*v);
        let (m, s) = infer_3d_only(&f3, &rec, &cfg).unwrap();
        assert_abs_diff_eq!(m.scores()[7], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn three_d_only_matches_pixel_loop() {
        let mut rng = SeededRng::new(9);
        let mut f3 = random_features(6, 6, 3, &mut rng);
        f3.validity_mut()[10] = false;
        let rec = random_features(6, 6, 3, &mut rng);
        let cfg = FusionConfig::default();
        let (m, s) = infer_3d_only(&f3, &rec, &cfg).unwrap();
        let raw: Vec<f64> = (0..36)
            .map(|p| if p == 10 { 0.0 } else { normalized_distance(f3.pixel_at(p), rec.pixel_at(p)).unwrap() })
            .collect();
        let raw = AnomalyMap::new(6, 6, raw, f3.validity().to_vec()).unwrap();
        let sm = box_filter(&box_filter(&raw, 3, 1).unwrap(), 5, 1).unwrap();
        assert_eq!(m.scores(), sm.scores());
        assert_eq!(s, sm.max_valid().unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        for bad in [
            FusionConfig { temperature: 0.0, ..Default::default() },
            FusionConfig { eps: -1.0, ..Default::default() },
            FusionConfig { gate_window: 4, ..Default::default() },
            FusionConfig { smoothing: vec![(4, 1)], ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn gate_stays_in_unit_interval(seed in any::<u64>(), k in 0.1f64..50.0) {
            let mut rng = SeededRng::new(seed);
            let d = random_map(1 + rng.below(12), 1 + rng.below(12), &mut rng, 0.6);
            let g = reliability_gate(&d, 5, k, 1e-8).unwrap();
            prop_assert!(g.scores().iter().all(|&a| (0.0..=1.0).contains(&a)));
        }

        #[test]
        fn weighted_rec_lies_between_inputs(d2 in 0.0f64..2.0, d3 in 0.0f64..2.0, t in 0.01f64..5.0) {
            let a = weighted_rec(d2, d3, t, 1e-8);
            prop_assert!(a <= d2.max(d3) + 1e-12);
            prop_assert!(a >= d2.min(d3) * (1.0 - 1e-8 / ((-t * 2.0).exp() * 2.0)) - 1e-12);
        }

        #[test]
        fn full_fusion_is_monotone_in_mapping_discrepancies(
            seed in any::<u64>(), bump in 0.0f64..0.5, which in 0usize..2
        ) {
            let mut rng = SeededRng::new(seed);
            let b = random_bundle(4, 4, &mut rng);
            let gate = AnomalyMap::new(4, 4, (0..16).map(|_| rng.uniform()).collect(), b.validity().to_vec()).unwrap();
            let cfg = FusionConfig::default();
            let base = fuse_with_gate(&b, &cfg, Some(&gate)).unwrap();
            let mut bumped = b.clone();
            let target = if which == 0 { &mut bumped.d2d_map } else { &mut bumped.d3d_map };
            let s: Vec<f64> = target.scores().iter().map(|v| (v + bump).min(2.0)).collect();
            *target = AnomalyMap::new(4, 4, s, b.validity().to_vec()).unwrap();
            let after = fuse_with_gate(&bumped, &cfg, Some(&gate)).unwrap();
            for (x, y) in base.scores().iter().zip(after.scores()) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn invalid_pixels_score_zero_in_every_variant(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let b = random_bundle(5, 5, &mut rng);
            for v in Variant::ALL {
                let out = fuse(&b, &FusionConfig { variant: v, ..Default::default() }).unwrap();
                for (s, valid) in out.scores().iter().zip(b.validity()) {
                    prop_assert!(*valid || *s == 0.0);
                }
            }
        }

        #[test]
        fn score_scales_with_square_root(seed in any::<u64>(), lambda in 0.01f64..100.0) {
            let mut rng = SeededRng::new(seed);
            let raw = random_map(6, 7, &mut rng, 0.8);
            let eps = 1e-8;
            let cfg = FusionConfig { eps, ..Default::default() };
            let (_, s) = finalize(&raw, &cfg).unwrap();
            let (_, sl) = finalize(&raw.scaled(lambda), &cfg).unwrap();
            // Exact form with eps, then the eps -> 0 limit.
            let m = smooth(&raw, &cfg.smoothing).unwrap().mean_valid().unwrap();
            let expect = lambda * s * ((m + eps) / (lambda * m + eps)).sqrt();
            prop_assert!((sl - expect).abs() <= 1e-9 * expect.max(1.0));
            let tiny = FusionConfig { eps: 1e-300, ..Default::default() };
            let (_, s0) = finalize(&raw, &tiny).unwrap();
            let (_, sl0) = finalize(&raw.scaled(lambda), &tiny).unwrap();
            prop_assert!((sl0 - lambda.sqrt() * s0).abs() <= 1e-9 * sl0.max(1.0));
        }

        #[test]
        fn vanishing_temperature_gives_arithmetic_mean(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let b = random_bundle(4, 5, &mut rng);
            let half = |m: &AnomalyMap| m.scaled(0.5);
            let b = DiscrepancyBundle::new(half(&b.d2d_map), half(&b.d3d_map), half(&b.d2d_rec), half(&b.d3d_rec)).unwrap();
            let ones = AnomalyMap::new(4, 5, vec![1.0; 20], b.validity().to_vec()).unwrap();
            let cfg = FusionConfig { temperature: 1e-9, eps: 1e-300, ..Default::default() };
            let out = fuse_with_gate(&b, &cfg, Some(&ones)).unwrap();
            for p in 0..20 {
                let expect = b.d2d_map.scores()[p] * b.d3d_map.scores()[p]
                    * (b.d2d_rec.scores()[p] + b.d3d_rec.scores()[p]) / 2.0;
                prop_assert!((out.scores()[p] - expect).abs() <= 1e-9);
            }
        }
    }
}
