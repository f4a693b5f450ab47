use crate::error::{Error, Result};
use crate::fnp::PromotedFeature;
use crate::nn;

/// Pixel anomaly map and image score for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` scores in `[0, 6]`.
    pub pixel_map: Vec<f64>,
    pub image_score: f64,
    /// Patch positions skipped because one of the two vectors had zero norm.
    pub degenerate: usize,
}

impl AnomalyResult {
    pub fn from_map(height: usize, width: usize, pixel_map: Vec<f64>, degenerate: usize) -> Result<Self> {
        if pixel_map.len() != height * width || pixel_map.is_empty() {
            return Err(Error::Input(format!(
                "{} scores do not fill a {height}×{width} map",
                pixel_map.len()
            )));
        }
        let image_score = pixel_map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            height,
            width,
            pixel_map,
            image_score,
            degenerate,
        })
    }

    /// Row-major index of the largest score (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.pixel_map.iter().enumerate() {
            if *v > self.pixel_map[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// Bilinear resize with corner-aligned sampling: output pixel `y` reads
/// source coordinate `y·(h−1)/(H−1)`.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping. Off by default; not part of
/// the reference scoring.
pub fn gaussian_smooth(map: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return map.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let (yy, xx) = if along_x {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += k * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(map, true), false)
}

/// Per-position `1 − cos(f*, f̂*)` on each layer grid, upsampled to
/// `out_size` and summed over the three layers; one result per image.
pub fn anomaly_map(
    encoded: &[PromotedFeature; 3],
    decoded: &[PromotedFeature; 3],
    out_size: (usize, usize),
    smoothing_sigma: f64,
) -> Result<Vec<AnomalyResult>> {
    let (out_h, out_w) = out_size;
    let b = encoded[0].patches.dims()[0];
    let mut maps = vec![vec![0.0; out_h * out_w]; b];
    let mut degenerate = vec![0usize; b];
    for (i, (e, d)) in encoded.iter().zip(decoded).enumerate() {
        if e.patches.dims() != d.patches.dims() || e.patches.dims()[0] != b {
            return Err(Error::Config(format!(
                "layer {} shapes differ: {:?} vs {:?}",
                i + 1,
                e.patches.dims(),
                d.patches.dims()
            )));
        }
        let (_, l, c) = e.patches.dims3()?;
        let (gh, gw) = e.grid;
        if gh * gw != l {
            return Err(Error::Config(format!("grid {gh}×{gw} does not hold {l} patches")));
        }
        let ev = nn::to_f64_vec(&e.patches)?;
        let dv = nn::to_f64_vec(&d.patches)?;
        for img in 0..b {
            let mut grid = vec![0.0; l];
            for (p, slot) in grid.iter_mut().enumerate() {
                let off = (img * l + p) * c;
                let (x, y) = (&ev[off..off + c], &dv[off..off + c]);
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
                if nx > 0.0 && ny > 0.0 {
                    *slot = (1.0 - dot / (nx * ny)).clamp(0.0, 2.0);
                } else {
                    degenerate[img] += 1;
                }
            }
            let up = upsample_bilinear(&grid, gh, gw, out_h, out_w);
            for (acc, v) in maps[img].iter_mut().zip(up) {
                *acc += v;
            }
        }
    }
    maps.into_iter()
        .zip(degenerate)
        .map(|(m, deg)| AnomalyResult::from_map(out_h, out_w, gaussian_smooth(&m, out_h, out_w, smoothing_sigma), deg))
        .collect()
}
