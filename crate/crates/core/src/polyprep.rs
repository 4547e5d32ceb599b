//! Point-cloud preprocessing: outlier detection (isolation forest, LOF and
//! their union), sequential chunking with chunk labels, per-chunk min-max
//! normalization, train/test splitting and pseudo-image layout.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{DenseFeatureMap, SeededRng};

pub type Point = [f64; 3];

pub const CONTAMINATION_LOW: f64 = 0.0001;
pub const CONTAMINATION_HIGH: f64 = 0.00015;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsolationForestConfig {
    pub trees: usize,
    pub subsample: usize,
}

impl Default for IsolationForestConfig {
    fn default() -> Self {
        Self { trees: 100, subsample: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { size: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<Node>,
}

impl IsolationTree {
    fn build(points: &[Point], idx: &mut [usize], limit: usize, rng: &mut SeededRng) -> Self {
        let mut tree = Self { nodes: Vec::new() };
        tree.grow(points, idx, 0, limit, rng);
        tree
    }

    fn grow(&mut self, points: &[Point], idx: &mut [usize], depth: usize, limit: usize, rng: &mut SeededRng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: idx.len() });
        if depth >= limit || idx.len() <= 1 {
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in idx.iter() {
            for d in 0..3 {
                lo[d] = lo[d].min(points[i][d]);
                hi[d] = hi[d].max(points[i][d]);
            }
        }
        let spread: Vec<usize> = (0..3).filter(|&d| hi[d] > lo[d]).collect();
        if spread.is_empty() {
            return id;
        }
        let dim = spread[rng.below(spread.len())];
        let value = rng.uniform_range(lo[dim], hi[dim]);
        let mut split = 0;
        for k in 0..idx.len() {
            if points[idx[k]][dim] < value {
                idx.swap(k, split);
                split += 1;
            }
        }
        // A draw equal to the minimum would leave the left side empty.
        if split == 0 {
            return id;
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(points, l, depth + 1, limit, rng);
        let right = self.grow(points, r, depth + 1, limit, rng);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    /// Edges to the leaf reached by `p` plus the expected remaining depth of
    /// that leaf's unresolved points.
    pub fn path_length(&self, p: &Point) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Leaf { size } => return depth + average_path_length(size),
                Node::Split { dim, value, left, right } => {
                    node = if p[dim] < value { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }

    pub fn height(&self) -> usize {
        fn h(nodes: &[Node], n: usize) -> usize {
            match nodes[n] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + h(nodes, left).max(h(nodes, right)),
            }
        }
        h(&self.nodes, 0)
    }
}

/// Average unsuccessful-search path length in a binary search tree of `n`
/// points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + 0.577_215_664_901_532_9) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    subsample: usize,
    height_limit: usize,
}

impl IsolationForest {
    /// Fits on `points`. The subsample is clamped to the point count.
    pub fn fit(points: &[Point], cfg: &IsolationForestConfig, rng: &mut SeededRng) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::contract(format!("isolation forest needs at least 2 points, got {}", points.len())));
        }
        if cfg.trees == 0 || cfg.subsample < 2 {
            return Err(Error::contract("isolation forest needs at least one tree and a subsample of 2 or more"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("points must be finite"));
        }
        let subsample = cfg.subsample.min(points.len());
        let height_limit = (subsample as f64).log2().ceil() as usize;
        let trees = (0..cfg.trees)
            .map(|_| {
                let mut idx = rng.sample_indices(points.len(), subsample);
                IsolationTree::build(points, &mut idx, height_limit, rng)
            })
            .collect();
        Ok(Self { trees, subsample, height_limit })
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }
    pub fn height_limit(&self) -> usize {
        self.height_limit
    }
    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    /// `2^(-E[h(p)] / c(subsample))`.
    pub fn score(&self, p: &Point) -> f64 {
        let mean = self.trees.iter().map(|t| t.path_length(p)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean / average_path_length(self.subsample))
    }
}

pub fn iso_fit_score(points: &[Point], cfg: &IsolationForestConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let forest = IsolationForest::fit(points, cfg, rng)?;
    Ok(points.iter().map(|p| forest.score(p)).collect())
}

/// `ceil(gamma * n)`, snapping products within rounding error of an integer.
pub fn contamination_count(gamma: f64, n: usize) -> usize {
    let x = gamma * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Flags the `ceil(gamma * n)` highest scores; ties go to the lower index.
pub fn threshold_by_contamination(scores: &[f64], gamma: f64) -> Result<Vec<bool>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::contract(format!("contamination must lie in (0, 1), got {gamma}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in &order[..contamination_count(gamma, scores.len())] {
        mask[i] = true;
    }
    Ok(mask)
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

/// Static 3-d tree for exact k-nearest-neighbour queries.
pub struct KdTree<'a> {
    points: &'a [Point],
    idx: Vec<usize>,
    nodes: Vec<KdNode>,
}

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.total_cmp(&o.0).then(self.1.cmp(&o.1))
    }
}

const KD_LEAF: usize = 16;

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let mut t = Self { points, idx: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            t.build(0, points.len());
        }
        t
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        if end - start <= KD_LEAF {
            return id;
        }
        let pts = self.points;
        let seg = &mut self.idx[start..end];
        let dim = (0..3)
            .max_by(|&a, &b| {
                let spread = |d: usize| {
                    let (lo, hi) = seg.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &i| {
                        (l.min(pts[i][d]), h.max(pts[i][d]))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap();
        let mid = seg.len() / 2;
        seg.select_nth_unstable_by(mid, |&a, &b| pts[a][dim].total_cmp(&pts[b][dim]));
        let value = pts[seg[mid]][dim];
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = KdNode::Split { dim, value, left, right };
        id
    }

    /// The `k` nearest points to `points[query]`, excluding `query` itself,
    /// as `(distance, index)` sorted by distance then index.
    pub fn knn_of(&self, query: usize, k: usize) -> Vec<(f64, usize)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(0, &self.points[query], query, k, &mut heap);
        }
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|Cand(d, i)| (d.sqrt(), i)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn search(&self, node: usize, q: &Point, skip: usize, k: usize, heap: &mut BinaryHeap<Cand>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.idx[start..end] {
                    if i == skip {
                        continue;
                    }
                    let c = Cand(dist2(q, &self.points[i]), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, skip, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.search(far, q, skip, k, heap);
                }
            }
        }
    }
}

/// Added to mean reachability distances so duplicated points keep a finite
/// density.
pub const LOF_DENSITY_EPS: f64 = 1e-10;

/// Local outlier factor with exactly `k` neighbours per point.
pub fn lof_fit_score(points: &[Point], k: usize) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::contract(format!("LOF needs at least 2 points, got {}", points.len())));
    }
    if k == 0 || k >= points.len() {
        return Err(Error::contract(format!("LOF needs 0 < k < N, got k = {k} with N = {}", points.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::contract("points must be finite"));
    }
    let tree = KdTree::new(points);
    let nn: Vec<Vec<(f64, usize)>> = (0..points.len()).map(|i| tree.knn_of(i, k)).collect();
    let kdist: Vec<f64> = nn.iter().map(|n| n[k - 1].0).collect();
    let lrd: Vec<f64> = nn
        .iter()
        .map(|n| {
            let reach = n.iter().map(|&(d, j)| d.max(kdist[j])).sum::<f64>() / k as f64;
            1.0 / (reach + LOF_DENSITY_EPS)
        })
        .collect();
    Ok(nn
        .iter()
        .enumerate()
        .map(|(i, n)| n.iter().map(|&(_, j)| lrd[j]).sum::<f64>() / k as f64 / lrd[i])
        .collect())
}

pub fn hybrid_mask(lof: &[bool], iso: &[bool]) -> Result<Vec<bool>> {
    if lof.len() != iso.len() {
        return Err(Error::contract(format!("mask lengths differ: {} vs {}", lof.len(), iso.len())));
    }
    Ok(lof.iter().zip(iso).map(|(a, b)| *a || *b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    #[default]
    Iso,
    Lof,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderPolicy {
    #[default]
    Drop,
    PadRepeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolyprepConfig {
    pub detector: Detector,
    pub contamination: f64,
    pub iso: IsolationForestConfig,
    pub lof_k: usize,
    pub chunk_size: usize,
    pub tau: f64,
    pub remainder: RemainderPolicy,
    pub train_fraction: f64,
    /// Side of the square pseudo-image; `side * side` must equal `chunk_size`.
    pub pseudo_image_side: usize,
}

impl Default for PolyprepConfig {
    fn default() -> Self {
        Self {
            detector: Detector::Iso,
            contamination: CONTAMINATION_LOW,
            iso: IsolationForestConfig::default(),
            lof_k: 20,
            chunk_size: 9216,
            tau: 0.0025,
            remainder: RemainderPolicy::Drop,
            train_fraction: 0.9,
            pseudo_image_side: 96,
        }
    }
}

impl PolyprepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.contamination > 0.0 && self.contamination < 1.0) {
            return bad(format!("contamination must lie in (0, 1), got {}", self.contamination));
        }
        if self.chunk_size == 0 {
            return bad("chunk size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.pseudo_image_side * self.pseudo_image_side != self.chunk_size {
            return bad(format!(
                "pseudo-image side {} does not tile chunks of {} points",
                self.pseudo_image_side, self.chunk_size
            ));
        }
        Ok(())
    }
}

/// Outlier mask of a whole scan under the configured detector.
pub fn outlier_mask(points: &[Point], cfg: &PolyprepConfig, rng: &mut SeededRng) -> Result<Vec<bool>> {
    let mut iso = || -> Result<Vec<bool>> {
        threshold_by_contamination(&iso_fit_score(points, &cfg.iso, rng)?, cfg.contamination)
    };
    let lof = || threshold_by_contamination(&lof_fit_score(points, cfg.lof_k)?, cfg.contamination);
    match cfg.detector {
        Detector::Iso => iso(),
        Detector::Lof => lof(),
        Detector::Hybrid => {
            let l = lof()?;
            hybrid_mask(&l, &iso()?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkLabel {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloudChunk {
    pub points: Vec<Point>,
    pub outlier_mask: Vec<bool>,
    pub abnormal_ratio: f64,
    pub label: ChunkLabel,
    pub scan_id: String,
    pub chunk_index: usize,
}

impl PointCloudChunk {
    pub fn is_anomalous(&self) -> bool {
        self.label == ChunkLabel::Anomalous
    }
}

/// Splits a scan into consecutive chunks in acquisition order and labels each
/// anomalous when its flagged fraction reaches `tau`.
pub fn chunk_and_label(
    points: &[Point],
    mask: &[bool],
    chunk_size: usize,
    tau: f64,
    remainder: RemainderPolicy,
    scan_id: &str,
) -> Result<Vec<PointCloudChunk>> {
    if chunk_size == 0 {
        return Err(Error::contract("chunk size must be positive"));
    }
    if points.len() != mask.len() {
        return Err(Error::contract(format!("{} points but {} mask entries", points.len(), mask.len())));
    }
    let make = |index: usize, pts: Vec<Point>, m: Vec<bool>| {
        let flagged = m.iter().filter(|&&f| f).count();
        let ratio = flagged as f64 / m.len() as f64;
        PointCloudChunk {
            points: pts,
            outlier_mask: m,
            abnormal_ratio: ratio,
            label: if ratio >= tau { ChunkLabel::Anomalous } else { ChunkLabel::Normal },
            scan_id: scan_id.to_string(),
            chunk_index: index,
        }
    };
    let mut chunks: Vec<PointCloudChunk> = points
        .chunks_exact(chunk_size)
        .zip(mask.chunks_exact(chunk_size))
        .enumerate()
        .map(|(i, (p, m))| make(i, p.to_vec(), m.to_vec()))
        .collect();
    let tail = points.len() % chunk_size;
    if tail > 0 && remainder == RemainderPolicy::PadRepeat {
        let start = points.len() - tail;
        let pts = (0..chunk_size).map(|j| points[start + j % tail]).collect();
        let m = (0..chunk_size).map(|j| mask[start + j % tail]).collect();
        chunks.push(make(chunks.len(), pts, m));
    }
    Ok(chunks)
}

/// Per-axis scaling to `[-1, 1]`; a constant axis maps to 0.
pub fn minmax_normalize(points: &[Point]) -> Result<Vec<Point>> {
    if points.is_empty() {
        return Err(Error::contract("cannot normalize an empty chunk"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    Ok(points
        .iter()
        .map(|p| {
            let mut q = [0.0; 3];
            for d in 0..3 {
                if hi[d] > lo[d] {
                    q[d] = (2.0 * (p[d] - lo[d]) / (hi[d] - lo[d]) - 1.0).clamp(-1.0, 1.0);
                }
            }
            q
        })
        .collect())
}

/// Detection, chunking and normalization of one scan. The detector's random
/// stream depends only on `(seed, scan_id)`.
pub fn preprocess_scan(points: &[Point], scan_id: &str, cfg: &PolyprepConfig, seed: u64) -> Result<Vec<PointCloudChunk>> {
    cfg.validate()?;
    let mut rng = SeededRng::derived(seed, &format!("polyprep/{scan_id}"));
    let mask = outlier_mask(points, cfg, &mut rng)?;
    let mut chunks = chunk_and_label(points, &mask, cfg.chunk_size, cfg.tau, cfg.remainder, scan_id)?;
    for c in &mut chunks {
        c.points = minmax_normalize(&c.points)?;
    }
    Ok(chunks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    /// Chunk indices, all normal.
    pub train: Vec<usize>,
    /// Held-out normal chunks followed by every anomalous chunk.
    pub test: Vec<usize>,
}

/// Seeded split: `floor(fraction * n_normal)` shuffled normal chunks train,
/// the remaining normals and all anomalous chunks test.
pub fn split_dataset(chunks: &[PointCloudChunk], train_fraction: f64, rng: &mut SeededRng) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut normal: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_anomalous()).collect();
    if normal.is_empty() {
        return Err(Error::NoNominalData);
    }
    rng.shuffle(&mut normal);
    let n_train = ((train_fraction * normal.len() as f64) + 1e-9).floor() as usize;
    let mut test = normal.split_off(n_train);
    test.sort_unstable();
    test.extend((0..chunks.len()).filter(|&i| chunks[i].is_anomalous()));
    Ok(DatasetSplit { train: normal, test })
}

/// Lays out a chunk row-major on a `side x side` grid with the coordinates as
/// three feature channels.
pub fn pseudo_image(points: &[Point], side: usize) -> Result<DenseFeatureMap> {
    if points.len() != side * side {
        return Err(Error::contract(format!("{} points do not fill a {side}x{side} pseudo-image", points.len())));
    }
    DenseFeatureMap::new(side, side, 3, points.iter().flatten().copied().collect(), vec![true; side * side])
}

/// Per-pixel outlier mask of a chunk on the pseudo-image grid.
pub fn pseudo_image_mask(mask: &[bool], side: usize) -> Result<Vec<bool>> {
    if mask.len() != side * side {
        return Err(Error::contract(format!("{} mask entries do not fill a {side}x{side} grid", mask.len())));
    }
    Ok(mask.to_vec())
}
