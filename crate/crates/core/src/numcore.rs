//! Dense numeric kernels shared by the rest of the crate: feature and score
//! grids, normalized distances, pooling, box filtering and the seeded RNG.
//!
//! Everything here accumulates in `f64`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
pub const EPS_NORM: f64 = 1e-12;

/// An `H x W x C` grid of feature vectors stored row-major as `(y, x, channel)`,
/// with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
    validity: Vec<bool>,
}

impl DenseFeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
        validity: Vec<bool>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::contract(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::contract(format!(
                "values length {} != {height}*{width}*{channels}",
                values.len()
            )));
        }
        if validity.len() != height * width {
            return Err(Error::contract(format!(
                "validity length {} != {height}*{width}",
                validity.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite feature value at index {i}")));
        }
        Ok(Self { height, width, channels, values, validity })
    }

    /// All-zero map with every pixel marked `valid`.
    pub fn zeros(height: usize, width: usize, channels: usize, valid: bool) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "feature map dims must be positive");
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
            validity: vec![valid; height * width],
        }
    }

    /// Fully valid map whose every pixel holds `c` in every channel.
    pub fn constant(height: usize, width: usize, channels: usize, c: f64) -> Self {
        let mut m = Self::zeros(height, width, channels, true);
        m.values.fill(c);
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn validity(&self) -> &[bool] {
        &self.validity
    }
    pub fn validity_mut(&mut self) -> &mut [bool] {
        &mut self.validity
    }
    pub fn into_parts(self) -> (Vec<f64>, Vec<bool>) {
        (self.values, self.validity)
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.pixel_at(y * self.width + x)
    }

    /// Feature vector of the pixel with flat row-major index `p`.
    pub fn pixel_at(&self, p: usize) -> &[f64] {
        &self.values[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_at_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.values[p * c..(p + 1) * c]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.validity[y * self.width + x]
    }

    pub fn num_valid(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }

    /// Copy with features zeroed at invalid pixels.
    pub fn masked(&self) -> Self {
        let mut out = self.clone();
        for p in 0..self.num_pixels() {
            if !self.validity[p] {
                out.pixel_at_mut(p).fill(0.0);
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// An `H x W` grid of nonnegative scores; invalid pixels hold exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
    validity: Vec<bool>,
}

impl AnomalyMap {
    /// Scores at invalid pixels are forced to 0. Negative or non-finite scores
    /// at valid pixels are rejected.
    pub fn new(height: usize, width: usize, mut scores: Vec<f64>, validity: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("anomaly map dims must be positive"));
        }
        if scores.len() != height * width || validity.len() != height * width {
            return Err(Error::contract(format!(
                "anomaly map buffers ({}, {}) do not match {height}x{width}",
                scores.len(),
                validity.len()
            )));
        }
        for (s, v) in scores.iter_mut().zip(&validity) {
            if !*v {
                *s = 0.0;
            } else if !s.is_finite() || *s < 0.0 {
                return Err(Error::contract(format!("invalid anomaly score {s}")));
            }
        }
        Ok(Self { height, width, scores, validity })
    }

    pub fn zeros(height: usize, width: usize, validity: Vec<bool>) -> Self {
        assert_eq!(validity.len(), height * width);
        Self { height, width, scores: vec![0.0; height * width], validity }
    }

    /// Builds a map by evaluating `f` at each valid pixel index.
    pub(crate) fn from_fn(
        height: usize,
        width: usize,
        validity: &[bool],
        mut f: impl FnMut(usize) -> f64,
    ) -> Self {
        let scores = (0..height * width)
            .map(|p| if validity[p] { f(p) } else { 0.0 })
            .collect();
        Self { height, width, scores, validity: validity.to_vec() }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
    pub fn validity(&self) -> &[bool] {
        &self.validity
    }
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.scores[y * self.width + x]
    }
    pub fn num_valid(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Scores of valid pixels in row-major order.
    pub fn valid_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().zip(&self.validity).filter(|(_, v)| **v).map(|(s, _)| *s)
    }

    pub fn max_valid(&self) -> Option<f64> {
        self.valid_scores().fold(None, |m, s| Some(m.map_or(s, |m: f64| m.max(s))))
    }

    pub fn mean_valid(&self) -> Option<f64> {
        let n = self.num_valid();
        (n > 0).then(|| self.valid_scores().sum::<f64>() / n as f64)
    }

    /// Multiplies every score by `k >= 0`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.scores.iter_mut().for_each(|s| *s *= k);
        out
    }
}

/// Unit-norm copy of `v`, or the zero vector when `||v|| < EPS_NORM`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < EPS_NORM {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|| a/||a|| - b/||b|| ||`, using the zero-vector rule for degenerate norms.
pub fn normalized_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "vector length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(normalized_distance_unchecked(a, b))
}

pub(crate) fn normalized_distance_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    let ia = if na < EPS_NORM { 0.0 } else { 1.0 / na };
    let ib = if nb < EPS_NORM { 0.0 } else { 1.0 / nb };
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x * ia - y * ib).powi(2)).sum();
    // Rounding can push identical directions slightly above 0 and antipodal
    // ones slightly above 2.
    d2.sqrt().min(2.0)
}

/// 3x3 mean pooling, stride 1, no padding. A pooled pixel is valid when any
/// pixel of its window is valid.
pub fn avg_pool_3x3_valid(map: &DenseFeatureMap) -> Result<DenseFeatureMap> {
    let (h, w, c) = (map.height, map.width, map.channels);
    if h < 3 || w < 3 {
        return Err(Error::contract(format!("avg_pool_3x3 needs at least 3x3, got {h}x{w}")));
    }
    let (oh, ow) = (h - 2, w - 2);
    let mut out = DenseFeatureMap::zeros(oh, ow, c, false);
    let mut acc = vec![0.0; c];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.fill(0.0);
            let mut any_valid = false;
            for y in oy..oy + 3 {
                for x in ox..ox + 3 {
                    any_valid |= map.is_valid(y, x);
                    for (a, v) in acc.iter_mut().zip(map.pixel(y, x)) {
                        *a += v;
                    }
                }
            }
            let p = oy * ow + ox;
            for (o, a) in out.pixel_at_mut(p).iter_mut().zip(&acc) {
                *o = a / 9.0;
            }
            out.validity[p] = any_valid;
        }
    }
    Ok(out)
}

/// Half-open bin `[start, end)` of output cell `i` when `n` inputs are split
/// into `out` bins.
pub(crate) fn adaptive_bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = (i * n) / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling to `out_h x out_w`. An output pixel is valid iff
/// its bin contains a valid input pixel; invalid outputs hold zeros.
pub fn adaptive_avg_pool(map: &DenseFeatureMap, out_h: usize, out_w: usize) -> Result<DenseFeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("adaptive pool target must be positive"));
    }
    let c = map.channels;
    let mut out = DenseFeatureMap::zeros(out_h, out_w, c, false);
    let mut acc = vec![0.0; c];
    for oy in 0..out_h {
        let (y0, y1) = adaptive_bin(oy, map.height, out_h);
        for ox in 0..out_w {
            let (x0, x1) = adaptive_bin(ox, map.width, out_w);
            acc.fill(0.0);
            let mut any_valid = false;
            for y in y0..y1 {
                for x in x0..x1 {
                    any_valid |= map.is_valid(y, x);
                    for (a, v) in acc.iter_mut().zip(map.pixel(y, x)) {
                        *a += v;
                    }
                }
            }
            let p = oy * out_w + ox;
            out.validity[p] = any_valid;
            if any_valid {
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for (o, a) in out.pixel_at_mut(p).iter_mut().zip(&acc) {
                    *o = a / n;
                }
            }
        }
    }
    Ok(out)
}

/// `passes` rounds of `kernel x kernel` mean filtering. Windows are clipped at
/// the border and only valid pixels enter a mean; invalid pixels stay 0.
pub fn box_filter(map: &AnomalyMap, kernel: usize, passes: usize) -> Result<AnomalyMap> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::contract(format!("box filter kernel must be odd, got {kernel}")));
    }
    if kernel > map.height.min(map.width) {
        return Err(Error::contract(format!(
            "box filter kernel {kernel} exceeds map size {}x{}",
            map.height, map.width
        )));
    }
    let r = kernel / 2;
    let (h, w) = (map.height, map.width);
    let mut cur = map.scores.clone();
    let mut next = vec![0.0; h * w];
    for _ in 0..passes {
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let p = y * w + x;
                if !map.validity[p] {
                    next[p] = 0.0;
                    continue;
                }
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let mut sum = 0.0;
                let mut n = 0usize;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let q = yy * w + xx;
                        if map.validity[q] {
                            sum += cur[q];
                            n += 1;
                        }
                    }
                }
                next[p] = sum / n as f64;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(AnomalyMap { height: h, width: w, scores: cur, validity: map.validity.clone() })
}

/// Derives a child seed from `(seed, purpose)`. Stable across platforms and
/// independent of scheduling order.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose string, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded, platform-independent random stream. Single owner; never shared
/// across concurrent tasks.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream for a named purpose.
    pub fn derived(seed: u64, purpose: &str) -> Self {
        Self::new(derive_seed(seed, purpose))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    /// Raw 64-bit draw, for seeding child streams.
    pub fn next_seed(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// `k` distinct indices from `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Persistable snapshot of a [`SeededRng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub position: u128,
}

impl From<&SeededRng> for RngState {
    fn from(r: &SeededRng) -> Self {
        Self { seed: r.seed, position: r.position() }
    }
}

impl From<RngState> for SeededRng {
    fn from(s: RngState) -> Self {
        let mut r = SeededRng::new(s.seed);
        r.inner.set_word_pos(s.position);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(h: usize, w: usize, vals: Vec<f64>) -> DenseFeatureMap {
        DenseFeatureMap::new(h, w, 1, vals, vec![true; h * w]).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(l2_normalize(&[1.0; 4]), vec![0.5; 4]);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(normalized_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(normalized_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert_abs_diff_eq!(
            normalized_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            std::f64::consts::SQRT_2,
            epsilon = 1e-12
        );
        assert!(matches!(normalized_distance(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
        // zero vector normalizes to zero, so the distance is the other's unit norm
        assert_abs_diff_eq!(normalized_distance(&[0.0, 0.0], &[2.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn pool3_examples() {
        let m = DenseFeatureMap::constant(5, 6, 2, 3.5);
        let p = avg_pool_3x3_valid(&m).unwrap();
        assert_eq!((p.height(), p.width()), (3, 4));
        assert!(p.values().iter().all(|v| (*v - 3.5).abs() < 1e-15));

        let mut v = vec![0.0; 9];
        v[4] = 9.0;
        let p = avg_pool_3x3_valid(&single(3, 3, v)).unwrap();
        assert_eq!(p.values(), &[1.0]);

        assert!(avg_pool_3x3_valid(&DenseFeatureMap::constant(2, 5, 1, 1.0)).is_err());
    }

    #[test]
    fn pool3_impulse_matches_window_sums() {
        // Impulses at every pixel (value = 1 + index) on a 4x4 grid; oracle is
        // the explicit window sum / 9.
        let vals: Vec<f64> = (0..16).map(|i| (i + 1) as f64).collect();
        let p = avg_pool_3x3_valid(&single(4, 4, vals.clone())).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += vals[(oy + dy) * 4 + ox + dx];
                    }
                }
                assert_abs_diff_eq!(p.pixel(oy, ox)[0], s / 9.0, epsilon = 1e-12);
            }
        }
        // 1..16 row-major: window means are 6, 7, 10, 11
        assert_eq!(p.values(), &[6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn adaptive_examples() {
        let vals: Vec<f64> = (0..12).map(f64::from).collect();
        let m = single(3, 4, vals);
        assert_eq!(adaptive_avg_pool(&m, 3, 4).unwrap(), m);

        let c = DenseFeatureMap::constant(4, 4, 3, -2.0);
        let p = adaptive_avg_pool(&c, 2, 2).unwrap();
        assert!(p.values().iter().all(|v| *v == -2.0));

        let m = single(3, 3, (1..=9).map(f64::from).collect());
        assert_eq!(adaptive_avg_pool(&m, 1, 1).unwrap().values(), &[5.0]);
    }

    #[test]
    fn adaptive_bins_overlap_when_not_divisible() {
        assert_eq!(adaptive_bin(0, 5, 3), (0, 2));
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bin(2, 5, 3), (3, 5));
        assert_eq!(adaptive_bin(0, 2, 4), (0, 1));
        assert_eq!(adaptive_bin(1, 2, 4), (0, 1));
    }

    #[test]
    fn box_filter_examples() {
        let c = AnomalyMap::new(4, 5, vec![0.7; 20], vec![true; 20]).unwrap();
        let f = box_filter(&c, 3, 2).unwrap();
        assert!(f.scores().iter().all(|s| (s - 0.7).abs() < 1e-15));

        let m = AnomalyMap::new(3, 3, (0..9).map(f64::from).collect(), vec![true; 9]).unwrap();
        assert_eq!(box_filter(&m, 1, 3).unwrap(), m);

        let mut v = vec![0.0; 9];
        v[4] = 9.0;
        let f = box_filter(&AnomalyMap::new(3, 3, v, vec![true; 9]).unwrap(), 3, 1).unwrap();
        assert_abs_diff_eq!(f.get(1, 1), 1.0, epsilon = 1e-15);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_abs_diff_eq!(f.get(y, x), 2.25, epsilon = 1e-15);
        }
        // edge-centre windows are 2x3 = 6 pixels
        assert_abs_diff_eq!(f.get(0, 1), 1.5, epsilon = 1e-15);

        assert!(box_filter(&m, 2, 1).is_err());
        assert!(box_filter(&m, 5, 1).is_err());
    }

    #[test]
    fn box_filter_skips_invalid() {
        let validity = vec![true, false, true, true, true, true, true, true, false];
        let m = AnomalyMap::new(3, 3, vec![1.0, 100.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 50.0], validity)
            .unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        let f = box_filter(&m, 3, 2).unwrap();
        for p in 0..9 {
            if m.validity()[p] {
                assert_abs_diff_eq!(f.scores()[p], 1.0, epsilon = 1e-15);
            } else {
                assert_eq!(f.scores()[p], 0.0);
            }
        }
    }

    #[test]
    fn box_filter_mass_matches_clipped_window_formula() {
        // One pass moves each pixel's mass into every window that covers it,
        // weighted by 1/|window|. Summing that is the analytical output mass.
        let (h, w, k) = (7usize, 9usize, 3usize);
        let mut rng = SeededRng::new(5);
        let scores: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let m = AnomalyMap::new(h, w, scores.clone(), vec![true; h * w]).unwrap();
        let f = box_filter(&m, k, 1).unwrap();
        let r = k / 2;
        let win = |y: usize, x: usize| {
            let ny = (y + r + 1).min(h) - y.saturating_sub(r);
            let nx = (x + r + 1).min(w) - x.saturating_sub(r);
            (ny * nx) as f64
        };
        let mut expected = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut share = 0.0;
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        share += 1.0 / win(yy, xx);
                    }
                }
                expected += scores[y * w + x] * share;
            }
        }
        let got: f64 = f.scores().iter().sum();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-9);
    }

    #[test]
    fn rng_is_reproducible_and_restorable() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<f64> = (0..10).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..10).map(|_| b.uniform()).collect();
        assert_eq!(xs, ys);
        let state = RngState::from(&a);
        let mut c = SeededRng::from(state);
        assert_eq!(a.normal(), c.normal());
        assert_ne!(derive_seed(1, "train"), derive_seed(1, "test"));
        assert_ne!(derive_seed(1, "train"), derive_seed(2, "train"));
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 3)
    }

    proptest! {
        #[test]
        fn distance_is_a_metric_on_the_sphere(a in vec3(), b in vec3(), c in vec3()) {
            let dab = normalized_distance(&a, &b).unwrap();
            let dba = normalized_distance(&b, &a).unwrap();
            let dac = normalized_distance(&a, &c).unwrap();
            let dcb = normalized_distance(&c, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&dab));
            prop_assert!((dab - dba).abs() < 1e-15);
            prop_assert!(dab <= dac + dcb + 1e-12);
        }

        #[test]
        fn distance_ignores_positive_scale(a in vec3(), b in vec3(), l in 0.01f64..100.0) {
            prop_assume!(norm(&a) > 1e-6);
            let sa: Vec<f64> = a.iter().map(|x| x * l).collect();
            let d0 = normalized_distance(&a, &b).unwrap();
            let d1 = normalized_distance(&sa, &b).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-12);
        }

        #[test]
        fn filters_are_linear(
            xs in prop::collection::vec(0.0f64..3.0, 30),
            ys in prop::collection::vec(0.0f64..3.0, 30),
            al in 0.0f64..2.0,
            be in 0.0f64..2.0,
            mask in prop::collection::vec(any::<bool>(), 30),
        ) {
            let mut validity = mask.clone();
            validity[0] = true;
            let mk = |v: &Vec<f64>| AnomalyMap::new(5, 6, v.clone(), validity.clone()).unwrap();
            let comb: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| al * x + be * y).collect();
            let fx = box_filter(&mk(&xs), 3, 2).unwrap();
            let fy = box_filter(&mk(&ys), 3, 2).unwrap();
            let fc = box_filter(&mk(&comb), 3, 2).unwrap();
            for p in 0..30 {
                let lin = al * fx.scores()[p] + be * fy.scores()[p];
                prop_assert!((fc.scores()[p] - lin).abs() < 1e-12);
            }

            let dm = |v: &Vec<f64>| DenseFeatureMap::new(5, 6, 1, v.clone(), vec![true; 30]).unwrap();
            let px = avg_pool_3x3_valid(&dm(&xs)).unwrap();
            let py = avg_pool_3x3_valid(&dm(&ys)).unwrap();
            let pc = avg_pool_3x3_valid(&dm(&comb)).unwrap();
            for i in 0..pc.values().len() {
                let lin = al * px.values()[i] + be * py.values()[i];
                prop_assert!((pc.values()[i] - lin).abs() < 1e-12);
            }
        }
    }
}
