//! Deterministic procedural texture dataset with exact defect masks.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::DatasetRoot;
use super::image_io::{write_mask_png, write_png};
use crate::error::{Error, Result};
use crate::sample::ImageSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    PatchSwap,
    IntensityBlot,
    ScratchLine,
}

impl DefectKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DefectKind::PatchSwap => "patch_swap",
            DefectKind::IntensityBlot => "intensity_blot",
            DefectKind::ScratchLine => "scratch_line",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_categories: usize,
    pub train_per_category: usize,
    pub test_good_per_category: usize,
    pub test_defect_per_category: usize,
    pub resolution: usize,
    pub seed: u64,
    pub defect_kinds: Vec<DefectKind>,
    /// Bounds on the defect area as a fraction of the image.
    pub min_defect_fraction: f64,
    pub max_defect_fraction: f64,
    /// Per-pixel Gaussian noise added to every image.
    pub pixel_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_categories: 3,
            train_per_category: 64,
            test_good_per_category: 12,
            test_defect_per_category: 12,
            resolution: 64,
            seed: 0,
            defect_kinds: vec![DefectKind::PatchSwap, DefectKind::IntensityBlot, DefectKind::ScratchLine],
            min_defect_fraction: 0.005,
            max_defect_fraction: 0.10,
            pixel_noise: 0.02,
        }
    }
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_categories == 0 {
            return bad("need at least one category");
        }
        if self.resolution < 16 {
            return bad("resolution must be at least 16");
        }
        if self.test_defect_per_category > 0 && self.defect_kinds.is_empty() {
            return bad("defective test images need at least one defect kind");
        }
        if !(0.0 < self.min_defect_fraction && self.min_defect_fraction < self.max_defect_fraction && self.max_defect_fraction <= 0.5) {
            return bad("defect fractions must satisfy 0 < min < max ≤ 0.5");
        }
        if self.pixel_noise < 0.0 {
            return bad("pixel_noise must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Stripes,
    Checker,
    Cells,
}

const FAMILIES: [Family; 3] = [Family::Stripes, Family::Checker, Family::Cells];

pub fn category_name(index: usize) -> String {
    let base = match FAMILIES[index % 3] {
        Family::Stripes => "stripes",
        Family::Checker => "checker",
        Family::Cells => "cells",
    };
    if index < 3 {
        base.to_string()
    } else {
        format!("{base}_{index}")
    }
}

/// Fixed appearance of one category; images vary only by jitter.
#[derive(Debug, Clone)]
struct Style {
    family: Family,
    colors: [[f64; 3]; 2],
    scale: f64,
    angle: f64,
}

impl Style {
    fn new(seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
        rng.set_stream(index as u64);
        let mut color = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
        let colors = [color(0.1, 0.45), color(0.55, 0.9)];
        let family = FAMILIES[index % 3];
        let scale = match family {
            Family::Stripes => rng.random_range(7.0..12.0),
            Family::Checker => rng.random_range(6.0..10.0),
            Family::Cells => rng.random_range(9.0..14.0),
        };
        Self {
            family,
            colors,
            scale,
            angle: rng.random_range(0.0..PI),
        }
    }

    /// Renders an `n × n` texture into an RGB buffer.
    fn render(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let scale = self.scale * rng.random_range(0.95..1.05);
        let angle = self.angle + rng.random_range(-0.08..0.08);
        let (ox, oy) = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
        let seeds: Vec<(f64, f64)> = if self.family == Family::Cells {
            let cells = (n as f64 / scale).ceil() as usize + 2;
            (0..cells * cells)
                .map(|i| {
                    let (cy, cx) = ((i / cells) as f64 - 1.0, (i % cells) as f64 - 1.0);
                    ((cy + rng.random::<f64>()) * scale, (cx + rng.random::<f64>()) * scale)
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut out = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64, x as f64);
                let t = match self.family {
                    Family::Stripes => {
                        let u = fx * angle.cos() + fy * angle.sin();
                        0.5 + 0.5 * (2.0 * PI * (u + ox) / scale).sin()
                    }
                    Family::Checker => {
                        let (a, b) = (((fx + ox) / scale).floor() as i64, ((fy + oy) / scale).floor() as i64);
                        ((a + b).rem_euclid(2)) as f64
                    }
                    Family::Cells => {
                        let d = seeds
                            .iter()
                            .map(|(sy, sx)| ((sy - fy).powi(2) + (sx - fx).powi(2)).sqrt())
                            .fold(f64::INFINITY, f64::min);
                        (d / (0.75 * scale)).min(1.0)
                    }
                };
                for ch in 0..3 {
                    out.push(self.colors[0][ch] * (1.0 - t) + self.colors[1][ch] * t);
                }
            }
        }
        out
    }
}

fn add_noise(pixels: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in pixels.iter_mut() {
            *p += normal.sample(rng);
        }
    }
}

/// Returns the defect mask; pixels are modified in place.
fn apply_defect(
    kind: DefectKind,
    pixels: &mut [f64],
    n: usize,
    donor: &Style,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let mut mask = vec![0u8; n * n];
    let nf = n as f64;
    match kind {
        DefectKind::PatchSwap => {
            let h = rng.random_range(nf * 0.1..nf * 0.3) as usize;
            let w = rng.random_range(nf * 0.1..nf * 0.3) as usize;
            let y0 = rng.random_range(0..n - h);
            let x0 = rng.random_range(0..n - w);
            let other = donor.render(n, rng);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let i = y * n + x;
                    mask[i] = 1;
                    pixels[i * 3..i * 3 + 3].copy_from_slice(&other[i * 3..i * 3 + 3]);
                }
            }
        }
        DefectKind::IntensityBlot => {
            let (ry, rx) = (rng.random_range(nf * 0.05..nf * 0.16), rng.random_range(nf * 0.05..nf * 0.16));
            let (cy, cx) = (rng.random_range(ry..nf - ry), rng.random_range(rx..nf - rx));
            let shift = if rng.random::<bool>() { 0.45 } else { -0.45 };
            let tint = [0; 3].map(|_| rng.random_range(0.6..1.0));
            for y in 0..n {
                for x in 0..n {
                    let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                    if d <= 1.0 {
                        let i = y * n + x;
                        mask[i] = 1;
                        for ch in 0..3 {
                            pixels[i * 3 + ch] += shift * tint[ch];
                        }
                    }
                }
            }
        }
        DefectKind::ScratchLine => {
            let len = rng.random_range(nf * 0.3..nf * 0.7);
            let angle = rng.random_range(0.0..PI);
            let (dy, dx) = (angle.sin(), angle.cos());
            let (cy, cx) = (rng.random_range(nf * 0.25..nf * 0.75), rng.random_range(nf * 0.25..nf * 0.75));
            let half_width = rng.random_range(0.9..1.6);
            let value = if rng.random::<bool>() { 0.97 } else { 0.03 };
            for y in 0..n {
                for x in 0..n {
                    let (py, px) = (y as f64 - cy, x as f64 - cx);
                    let along = py * dy + px * dx;
                    let across = (py * dx - px * dy).abs();
                    if along.abs() <= len / 2.0 && across <= half_width {
                        let i = y * n + x;
                        mask[i] = 1;
                        pixels[i * 3..i * 3 + 3].fill(value);
                    }
                }
            }
        }
    }
    mask
}

fn to_sample(pixels: &[f64], n: usize) -> Result<ImageSample> {
    // Quantize exactly as the PNG will store it so returned samples equal reloaded ones.
    let q = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0).collect();
    ImageSample::new(n, n, q)
}

fn image_rng(seed: u64, category: usize, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((category as u64) << 40) | (split << 32) | index as u64);
    rng
}

/// Produces every sample of the dataset in memory without touching disk.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    let n = spec.resolution;
    let styles: Vec<Style> = (0..spec.num_categories).map(|k| Style::new(spec.seed, k)).collect();
    let mut out = Vec::new();
    for (k, style) in styles.iter().enumerate() {
        let cat = category_name(k);
        let donor = if spec.num_categories > 1 {
            styles[(k + 1) % spec.num_categories].clone()
        } else {
            Style::new(spec.seed.wrapping_add(1), k + 1)
        };
        let normal = |split: u64, idx: usize| -> Result<(Vec<f64>, ChaCha8Rng)> {
            let mut rng = image_rng(spec.seed, k, split, idx);
            let mut px = style.render(n, &mut rng);
            add_noise(&mut px, spec.pixel_noise, &mut rng);
            Ok((px, rng))
        };
        for i in 0..spec.train_per_category {
            let (px, _) = normal(0, i)?;
            let mut s = to_sample(&px, n)?;
            s.category = cat.clone();
            s.name = format!("{cat}/train/good/{i:03}.png");
            out.push(s);
        }
        for i in 0..spec.test_good_per_category {
            let (px, _) = normal(1, i)?;
            let mut s = to_sample(&px, n)?;
            s.category = cat.clone();
            s.name = format!("{cat}/test/good/{i:03}.png");
            out.push(s);
        }
        for i in 0..spec.test_defect_per_category {
            let kind = spec.defect_kinds[i % spec.defect_kinds.len()];
            let (base, mut rng) = normal(2, i)?;
            let mut attempt = 0;
            let (px, mask) = loop {
                let mut px = base.clone();
                let mask = apply_defect(kind, &mut px, n, &donor, &mut rng);
                let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / (n * n) as f64;
                if (spec.min_defect_fraction..=spec.max_defect_fraction).contains(&frac) {
                    break (px, mask);
                }
                attempt += 1;
                if attempt > 200 {
                    return Err(Error::Config(format!(
                        "could not place a {} defect within the area bounds at resolution {n}",
                        kind.dir_name()
                    )));
                }
            };
            let mut s = to_sample(&px, n)?;
            s.category = cat.clone();
            s.defect = kind.dir_name().into();
            s.is_anomalous = true;
            s.mask = Some(mask);
            s.name = format!("{cat}/test/{}/{i:03}.png", kind.dir_name());
            out.push(s);
        }
    }
    Ok(out)
}

/// Writes the dataset in the MVTec layout under `out`.
pub fn generate_synthetic(spec: &SynthSpec, out: &Path, overwrite: bool) -> Result<DatasetRoot> {
    spec.validate()?;
    let categories: Vec<String> = (0..spec.num_categories).map(category_name).collect();
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::Input(format!(
                "{} exists and is not empty; pass --overwrite to replace it",
                out.display()
            )));
        }
        for cat in &categories {
            let dir = out.join(cat);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
    }
    for sample in synthesize(spec)? {
        let path = out.join(&sample.name);
        write_png(&sample, &path)?;
        if let Some(mask) = &sample.mask {
            let stem = path.file_stem().expect("file name").to_string_lossy().to_string();
            let mask_path = out
                .join(&sample.category)
                .join("ground_truth")
                .join(&sample.defect)
                .join(format!("{stem}_mask.png"));
            write_mask_png(mask, sample.height, sample.width, &mask_path)?;
        }
    }
    let spec_path = out.join("synth.toml");
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    let mut categories = categories;
    categories.sort();
    Ok(DatasetRoot {
        root: PathBuf::from(out),
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_per_category: 3,
            test_good_per_category: 2,
            test_defect_per_category: 6,
            resolution: 32,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        assert_eq!(synthesize(&small()).unwrap(), synthesize(&small()).unwrap());
        let other = SynthSpec { seed: 7, ..small() };
        assert_ne!(synthesize(&small()).unwrap(), synthesize(&other).unwrap());
    }

    #[test]
    fn masks_exist_exactly_for_defects_within_area_bounds() {
        let spec = SynthSpec::default();
        let samples = synthesize(&spec).unwrap();
        assert_eq!(samples.len(), 3 * (64 + 24));
        for s in &samples {
            match &s.mask {
                Some(mask) => {
                    assert!(s.is_anomalous);
                    let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / mask.len() as f64;
                    assert!((0.005..=0.10).contains(&frac), "{} covers {frac}", s.name);
                }
                None => assert!(!s.is_anomalous && s.defect == "good"),
            }
        }
    }

    #[test]
    fn every_defect_kind_appears_in_each_category() {
        let samples = synthesize(&small()).unwrap();
        for k in 0..3 {
            let cat = category_name(k);
            for kind in ["patch_swap", "intensity_blot", "scratch_line"] {
                assert!(samples.iter().any(|s| s.category == cat && s.defect == kind));
            }
        }
    }

    #[test]
    fn categories_have_distinct_statistics() {
        let samples = synthesize(&small()).unwrap();
        let mean = |cat: &str| {
            let px: Vec<f32> = samples.iter().filter(|s| s.category == cat).flat_map(|s| s.pixels.clone()).collect();
            px.iter().sum::<f32>() / px.len() as f32
        };
        let names: Vec<String> = (0..3).map(category_name).collect();
        assert_ne!(mean(&names[0]), mean(&names[1]));
        assert_ne!(mean(&names[1]), mean(&names[2]));
    }

    #[test]
    fn spec_rejects_unknown_keys_and_bad_bounds() {
        assert!(SynthSpec::from_toml_str("seed = 3\nresolution = 32").is_ok());
        assert!(matches!(SynthSpec::from_toml_str("colour = 1"), Err(Error::Config(_))));
        assert!(matches!(
            SynthSpec::from_toml_str("min_defect_fraction = 0.2\nmax_defect_fraction = 0.1"),
            Err(Error::Config(_))
        ));
    }
}
