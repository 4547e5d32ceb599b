//! Detection and localization metrics plus the throughput harness.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::AnomalyMap;

/// Sweeps with more distinct scores than this switch to quantile thresholds.
pub const MAX_THRESHOLDS: usize = 5000;

/// Rank-based ROC AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, mid-tie) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_mid * pos;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// Connected components of a binary mask, labeled in row-major order of each
/// component's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    pub height: usize,
    pub width: usize,
    /// Per-pixel component index plus one; 0 is background.
    pub labels: Vec<u32>,
    /// Row-major sorted pixel indices of each component.
    pub components: Vec<Vec<usize>>,
}

pub fn connected_components(mask: &[bool], height: usize, width: usize, conn: Connectivity) -> Result<RegionSet> {
    if mask.len() != height * width {
        return Err(Error::contract(format!("mask has {} pixels, expected {height}x{width}", mask.len())));
    }
    let offsets: &[(i64, i64)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let mut labels = vec![0u32; mask.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = components.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (y, x) = ((p / width) as i64, (p % width) as i64);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                    continue;
                }
                let q = ny as usize * width + nx as usize;
                if mask[q] && labels[q] == 0 {
                    labels[q] = label;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    Ok(RegionSet { height, width, labels, components })
}

/// One point of the per-region overlap curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// PRO-versus-FPR points for the threshold sweep, in decreasing threshold
/// order. A pixel is predicted anomalous when its score is `>= threshold`.
/// FPR pools the anomaly-free pixels of all images; PRO averages the overlap
/// of every ground-truth region of every image.
pub fn pro_curve(maps: &[AnomalyMap], gts: &[Vec<bool>], conn: Connectivity) -> Result<Vec<ProPoint>> {
    if maps.is_empty() || maps.len() != gts.len() {
        return Err(Error::contract(format!("{} maps but {} ground truths", maps.len(), gts.len())));
    }
    // Per-pixel contribution to the PRO sum (1/|region|) or to the FP count.
    let mut entries: Vec<(f64, f64, bool)> = Vec::new();
    let mut n_regions = 0usize;
    let mut n_neg = 0usize;
    for (m, gt) in maps.iter().zip(gts) {
        let regions = connected_components(gt, m.height(), m.width(), conn)?;
        n_regions += regions.components.len();
        for (p, &s) in m.scores().iter().enumerate() {
            let label = regions.labels[p];
            if label == 0 {
                n_neg += 1;
                entries.push((s, 0.0, true));
            } else {
                let size = regions.components[label as usize - 1].len();
                entries.push((s, 1.0 / size as f64, false));
            }
        }
    }
    if n_regions == 0 {
        return Err(Error::NoRegions);
    }
    if n_neg == 0 {
        return Err(Error::FprUndefined);
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut distinct: Vec<f64> = entries.iter().map(|e| e.0).collect();
    distinct.dedup();
    let thresholds: Vec<f64> = if distinct.len() <= MAX_THRESHOLDS {
        distinct
    } else {
        // Quantile-spaced over the pooled (descending) scores.
        let n = entries.len();
        let mut t: Vec<f64> =
            (0..MAX_THRESHOLDS).map(|i| entries[i * (n - 1) / (MAX_THRESHOLDS - 1)].0).collect();
        t.dedup();
        t
    };
    let mut points = Vec::with_capacity(thresholds.len());
    let (mut fp, mut overlap) = (0usize, 0.0f64);
    let mut k = 0;
    for t in thresholds {
        while k < entries.len() && entries[k].0 >= t {
            let (_, w, neg) = entries[k];
            if neg {
                fp += 1;
            } else {
                overlap += w;
            }
            k += 1;
        }
        points.push(ProPoint { threshold: t, fpr: fp as f64 / n_neg as f64, pro: overlap / n_regions as f64 });
    }
    Ok(points)
}

/// Trapezoid area under `(0,0) -> points -> (1,1)` for FPR in `[0, limit]`,
/// interpolating the segment that crosses `limit`. Not normalized.
pub fn pro_integral(points: &[ProPoint], limit: f64) -> f64 {
    let mut curve = Vec::with_capacity(points.len() + 2);
    curve.push((0.0, 0.0));
    curve.extend(points.iter().map(|p| (p.fpr, p.pro)));
    curve.push((1.0, 1.0));
    let mut area = 0.0;
    for seg in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

/// Area under the per-region overlap curve up to `fpr_limit`, normalized by
/// the limit.
pub fn aupro(maps: &[AnomalyMap], gts: &[Vec<bool>], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::contract(format!("fpr limit must lie in (0, 1], got {fpr_limit}")));
    }
    let points = pro_curve(maps, gts, Connectivity::Four)?;
    Ok(pro_integral(&points, fpr_limit) / fpr_limit)
}

/// Pixel-level AUROC over all pixels of all images.
pub fn pixel_auroc(maps: &[AnomalyMap], gts: &[Vec<bool>]) -> Result<f64> {
    if maps.len() != gts.len() {
        return Err(Error::contract(format!("{} maps but {} ground truths", maps.len(), gts.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, gt) in maps.iter().zip(gts) {
        if gt.len() != m.scores().len() {
            return Err(Error::contract("ground truth shape differs from its anomaly map"));
        }
        scores.extend_from_slice(m.scores());
        labels.extend_from_slice(gt);
    }
    auroc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub samples: usize,
    pub fps: f64,
    pub mean_seconds: f64,
    pub peak_memory_bytes: u64,
}

/// Peak resident set size of this process, from `/proc/self/status`.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    ["VmHWM:", "VmRSS:"].iter().find_map(|key| {
        let line = status.lines().find(|l| l.starts_with(key))?;
        let kb: u64 = line[key.len()..].trim().trim_end_matches("kB").trim().parse().ok()?;
        Some(kb * 1024)
    })
}

/// Runs `step` once per sample, timing the whole loop.
pub fn measure_throughput<S>(samples: &[S], mut step: impl FnMut(&S) -> Result<()>) -> Result<Throughput> {
    if samples.is_empty() {
        return Err(Error::contract("throughput needs at least one sample"));
    }
    let start = Instant::now();
    for s in samples {
        step(s)?;
    }
    let elapsed = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(Throughput {
        samples: samples.len(),
        fps: samples.len() as f64 / elapsed,
        mean_seconds: elapsed / samples.len() as f64,
        peak_memory_bytes: peak_memory_bytes().unwrap_or(0),
    })
}

/// One results-ledger row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr_limit: Option<f64>,
    pub samples: usize,
    pub wall_clock_seconds: f64,
}
