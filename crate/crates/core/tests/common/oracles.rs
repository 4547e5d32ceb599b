//! Brute-force reference implementations for metric checks.

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut won, mut total) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                total += 1.0;
                won += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    won / total
}

/// 4-connected regions of a mask by depth-first flood fill.
pub fn regions(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut region = Vec::new();
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = (p / w, p % w);
            let mut nb = Vec::new();
            if y > 0 {
                nb.push(p - w);
            }
            if y + 1 < h {
                nb.push(p + w);
            }
            if x > 0 {
                nb.push(p - 1);
            }
            if x + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        out.push(region);
    }
    out
}

/// Normalized PRO area up to `limit`, evaluating every distinct score as a
/// threshold and closing the curve at (0,0) and (1,1).
pub fn aupro_exhaustive(maps: &[(usize, usize, Vec<f64>)], gts: &[Vec<bool>], limit: f64) -> f64 {
    let regs: Vec<Vec<Vec<usize>>> = maps.iter().zip(gts).map(|((h, w, _), g)| regions(g, *h, *w)).collect();
    let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.2.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds {
        let (mut fp, mut neg, mut pro, mut nr) = (0usize, 0usize, 0.0, 0usize);
        for (((_, _, s), g), rs) in maps.iter().zip(gts).zip(&regs) {
            for (p, &v) in s.iter().enumerate() {
                if !g[p] {
                    neg += 1;
                    fp += usize::from(v >= t);
                }
            }
            for r in rs {
                pro += r.iter().filter(|&&p| s[p] >= t).count() as f64 / r.len() as f64;
                nr += 1;
            }
        }
        curve.push((fp as f64 / neg as f64, pro / nr as f64));
    }
    curve.push((1.0, 1.0));
    let mut area = 0.0;
    for k in 1..curve.len() {
        let (x0, y0) = curve[k - 1];
        let (x1, y1) = curve[k];
        let (a, b) = (x0.min(limit), x1.min(limit));
        if b > a {
            let ya = y0 + (y1 - y0) * (a - x0) / (x1 - x0);
            let yb = y0 + (y1 - y0) * (b - x0) / (x1 - x0);
            area += (b - a) * (ya + yb) / 2.0;
        }
    }
    area / limit
}
