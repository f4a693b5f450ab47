//! Threshold-free detection metrics over score/label lists and pixel maps.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("scores contain NaN".into()));
    }
    Ok(())
}

/// Indices ordered by descending score; equal scores are grouped downstream.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Iterates `order` in runs of equal score.
fn tie_groups<'a>(order: &'a [usize], scores: &'a [f64]) -> impl Iterator<Item = &'a [usize]> + 'a {
    order.chunk_by(move |&a, &b| scores[a] == scores[b])
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    // Walk from the top: each positive beats every negative below its group
    // and ties half of the negatives inside it.
    let order = descending(scores);
    let mut negatives_above = 0usize;
    let mut wins = 0.0f64;
    for group in tie_groups(&order, scores) {
        let p = group.iter().filter(|&&i| labels[i]).count();
        let n = group.len() - p;
        wins += p as f64 * ((neg - negatives_above - n) as f64 + 0.5 * n as f64);
        negatives_above += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// `Σ (R_k − R_{k−1})·P_k` over descending distinct-score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let order = descending(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for group in tie_groups(&order, scores) {
        tp += group.iter().filter(|&&i| labels[i]).count();
        seen += group.len();
        let recall = tp as f64 / pos as f64;
        ap += (recall - last_recall) * (tp as f64 / seen as f64);
        last_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_neighbours(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            other => Err(Error::Config(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }
}

/// Connected components of the nonzero pixels. Returns per-pixel labels
/// (0 for background, regions numbered from 1 in raster order) and the
/// region count.
pub fn label_regions(mask: &[u8], height: usize, width: usize, conn: Connectivity) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count as u32;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dy == 0 && dx == 0) || (conn == Connectivity::Four && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] != 0 && labels[q] == 0 {
                        labels[q] = count as u32;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// One scored image with its binary ground-truth mask.
#[derive(Debug, Clone, Copy)]
pub struct MapView<'a> {
    pub height: usize,
    pub width: usize,
    pub scores: &'a [f64],
    pub mask: &'a [u8],
}

/// Area under the per-region-overlap curve for false-positive rates in
/// `[0, fpr_limit]`, divided by `fpr_limit`.
pub fn aupro(maps: &[MapView<'_>], fpr_limit: f64, conn: Connectivity) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr_limit must lie in (0, 1], got {fpr_limit}")));
    }
    let mut scores = Vec::new();
    // Per pixel: 0 for normal, otherwise the global region id.
    let mut region = Vec::new();
    let mut sizes: Vec<usize> = vec![0];
    for m in maps {
        let n = m.height * m.width;
        if m.scores.len() != n || m.mask.len() != n {
            return Err(Error::Input("score map and mask sizes differ".into()));
        }
        if m.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Input("scores contain NaN".into()));
        }
        let (labels, count) = label_regions(m.mask, m.height, m.width, conn);
        let base = sizes.len() - 1;
        sizes.resize(base + 1 + count, 0);
        for &l in &labels {
            let id = if l == 0 { 0 } else { base + l as usize };
            sizes[id] += 1;
            region.push(id);
        }
        scores.extend_from_slice(m.scores);
    }
    let regions = sizes.len() - 1;
    let negatives = sizes[0];
    if regions == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs at least one anomalous region".into()));
    }
    if negatives == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs normal pixels".into()));
    }

    let order = descending(&scores);
    let mut curve = vec![(0.0f64, 0.0f64)];
    let (mut fp, mut pro) = (0usize, 0.0f64);
    for group in tie_groups(&order, &scores) {
        for &i in group {
            match region[i] {
                0 => fp += 1,
                r => pro += 1.0 / (sizes[r] as f64 * regions as f64),
            }
        }
        curve.push((fp as f64 / negatives as f64, pro.min(1.0)));
    }
    Ok(integrate_to(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoidal area under a curve sorted by x, truncated at `limit` with
/// linear interpolation.
pub(crate) fn integrate_to(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}
