//! Image- and pixel-level detection metrics.
//!
//! Scores are "higher means more anomalous"; labels are `true` for anomalous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, ties in index order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// `(tp, fp, threshold)` after each block of tied scores, highest first.
fn tie_blocks(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize, f64)> {
    let order = descending(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp, t));
    }
    out
}

/// Area under the ROC curve via the rank-sum statistic with average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order = descending(scores);
    order.reverse();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (tp, fp, _) in tie_blocks(scores, labels) {
        ap += (tp - prev_tp) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    Ok(ap)
}

/// Best F1 over thresholds `score >= t`, and the `t` reaching it (the lowest
/// such `t` on ties).
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::UndefinedMetric("F1 needs a positive".into()));
    }
    let mut best = (0.0, f64::INFINITY);
    for (tp, fp, t) in tie_blocks(scores, labels) {
        let f1 = 2.0 * tp as f64 / (tp + fp + p) as f64;
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

/// 8-connected components of an `h × w` row-major mask, each as sorted pixel
/// indices, ordered by their first pixel in raster order.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), h * w, "mask size");
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut region = Vec::new();
        while let Some(i) = stack.pop() {
            region.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProSweep {
    /// Every distinct score is a threshold; step integration, left-continuous.
    #[default]
    Exact,
    /// 256 uniform bins between the extreme scores; trapezoid integration.
    Binned,
}

pub const PRO_BINS: usize = 256;

/// Per-region overlap curve integrated up to `fpr_limit`, normalised by it.
///
/// `maps[i]` and `masks[i]` are `h × w` row-major. FPR counts every negative
/// pixel of the set, including those of anomalous images.
pub fn aupro(maps: &[&[f64]], masks: &[&[bool]], h: usize, w: usize, fpr_limit: f64, sweep: ProSweep) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Contract(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Contract(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    let mut scores = Vec::with_capacity(maps.len() * h * w);
    // region id per pixel, usize::MAX for normal pixels
    let mut region_of = Vec::with_capacity(scores.capacity());
    let mut region_sizes = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        if m.len() != h * w || k.len() != h * w {
            return Err(Error::shape("aupro", &[m.len(), k.len()], &[h * w]));
        }
        let offset = region_of.len();
        region_of.extend(std::iter::repeat_n(usize::MAX, h * w));
        for r in connected_components(k, h, w) {
            for &i in &r {
                region_of[offset + i] = region_sizes.len();
            }
            region_sizes.push(r.len());
        }
        scores.extend_from_slice(m);
    }
    if region_sizes.is_empty() {
        return Err(Error::UndefinedMetric("AUPRO needs an anomalous region".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("pixel score {i}")));
    }
    let negatives = region_of.iter().filter(|&&r| r == usize::MAX).count();
    if negatives == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs a normal pixel".into()));
    }
    let curve = match sweep {
        ProSweep::Exact => {
            let order = descending(&scores);
            let keys: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
            let groups = group_ends(&keys);
            pro_curve(&order, &groups, &region_of, &region_sizes, negatives)
        }
        ProSweep::Binned => {
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bin = |s: f64| {
                if hi > lo {
                    (((s - lo) / (hi - lo) * PRO_BINS as f64) as usize).min(PRO_BINS - 1)
                } else {
                    0
                }
            };
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by_key(|&i| std::cmp::Reverse(bin(scores[i])));
            let keys: Vec<f64> = order.iter().map(|&i| bin(scores[i]) as f64).collect();
            let groups = group_ends(&keys);
            pro_curve(&order, &groups, &region_of, &region_sizes, negatives)
        }
    };
    let area = match sweep {
        ProSweep::Exact => step_area(&curve, fpr_limit),
        ProSweep::Binned => trapezoid_area(&curve, fpr_limit),
    };
    Ok(area / fpr_limit)
}

/// End index of each run of equal keys.
fn group_ends(keys: &[f64]) -> Vec<usize> {
    let mut ends = Vec::new();
    for i in 0..keys.len() {
        if i + 1 == keys.len() || keys[i + 1] != keys[i] {
            ends.push(i + 1);
        }
    }
    ends
}

/// `(fpr, pro)` points starting at the origin, one per threshold group.
fn pro_curve(
    order: &[usize],
    ends: &[usize],
    region_of: &[usize],
    sizes: &[usize],
    negatives: usize,
) -> Vec<(f64, f64)> {
    let mut overlap_sum = 0.0;
    let mut fp = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut start = 0;
    for &end in ends {
        for &i in &order[start..end] {
            match region_of[i] {
                usize::MAX => fp += 1,
                r => {
                    overlap_sum += 1.0 / sizes[r] as f64;
                }
            }
        }
        start = end;
        curve.push((fp as f64 / negatives as f64, overlap_sum / sizes.len() as f64));
    }
    curve
}

fn step_area(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, _)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        area += (x1.min(limit) - x0) * y0;
    }
    if let Some(&(x, y)) = curve.last() {
        if x < limit {
            area += (limit - x) * y;
        }
    }
    area
}

fn trapezoid_area(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area
}
