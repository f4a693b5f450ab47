//! Heatmap, overlay and raw-map writers for a single anomaly map.

use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use super::image_io::to_rgb_image;
use crate::error::{Error, Result};
use crate::sample::ImageSample;
use crate::scoring::AnomalyResult;

/// Map value rendered as full white. Heatmaps use a fixed scale so that files
/// from different images are comparable.
pub const HEATMAP_SCALE: f64 = 6.0;
pub const OVERLAY_ALPHA: f64 = 0.5;
const RAW_MAGIC: &[u8; 4] = b"RMAP";

fn level(v: f64) -> f64 {
    (v / HEATMAP_SCALE).clamp(0.0, 1.0)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// 16-bit grayscale PNG, 0 at map value 0 and 65535 at [`HEATMAP_SCALE`].
pub fn write_heatmap(result: &AnomalyResult, path: &Path) -> Result<()> {
    create_parent(path)?;
    let w = result.width;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, result.height as u32, |x, y| {
        Luma([(level(result.pixel_map[y as usize * w + x as usize]) * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Piecewise-linear jet colormap on `[0, 1]`.
pub fn jet(t: f64) -> [f64; 3] {
    let c = |x: f64| (1.5 - (4.0 * t - x).abs()).clamp(0.0, 1.0);
    [c(3.0), c(2.0), c(1.0)]
}

pub fn overlay(image: &ImageSample, result: &AnomalyResult) -> Result<RgbImage> {
    if (image.height, image.width) != (result.height, result.width) {
        return Err(Error::Input(format!(
            "map {}×{} does not match image {}×{}",
            result.height, result.width, image.height, image.width
        )));
    }
    let base = to_rgb_image(image);
    Ok(ImageBuffer::from_fn(image.width as u32, image.height as u32, |x, y| {
        let heat = jet(level(result.pixel_map[y as usize * image.width + x as usize]));
        let px = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| {
            ((1.0 - OVERLAY_ALPHA) * px[c] as f64 + OVERLAY_ALPHA * heat[c] * 255.0).round() as u8
        }))
    }))
}

pub fn write_overlay(image: &ImageSample, result: &AnomalyResult, path: &Path) -> Result<()> {
    create_parent(path)?;
    overlay(image, result)?
        .save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `RMAP`, `u32` height, `u32` width, then `f32` values row-major, all
/// little-endian.
pub fn write_raw_map(result: &AnomalyResult, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut buf = Vec::with_capacity(12 + 4 * result.pixel_map.len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(result.height as u32).to_le_bytes());
    buf.extend_from_slice(&(result.width as u32).to_le_bytes());
    for &v in &result.pixel_map {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Returns `(height, width, values)`.
pub fn read_raw_map(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[..4] != RAW_MAGIC {
        return Err(Error::Format(format!("{} is not a raw map", path.display())));
    }
    let h = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() != 12 + 4 * h * w {
        return Err(Error::Format(format!("{} has {} bytes for a {h}×{w} map", path.display(), buf.len())));
    }
    let values = buf[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((h, w, values))
}
