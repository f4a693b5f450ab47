use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::sample::ImageSample;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb_image(sample: &ImageSample) -> RgbImage {
    ImageBuffer::from_fn(sample.width as u32, sample.height as u32, |x, y| {
        Rgb(sample.pixel(y as usize, x as usize).map(quantize))
    })
}

pub fn from_rgb_image(img: &RgbImage) -> Result<ImageSample> {
    let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    ImageSample::new(img.height() as usize, img.width() as usize, pixels)
}

pub fn write_png(sample: &ImageSample, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    to_rgb_image(sample).save(path).map_err(|e| annotate(path, e))
}

pub fn write_mask_png(mask: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let img: GrayImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        Luma([if mask[y as usize * width + x as usize] != 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| annotate(path, e))
}

fn annotate(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads any supported image as RGB, resizing to `size × size` when given.
pub fn read_image(path: &Path, size: Option<usize>) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| annotate(path, e))?.to_rgb8();
    let img = match size {
        Some(s) if (img.width() as usize, img.height() as usize) != (s, s) => {
            imageops::resize(&img, s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    };
    let mut sample = from_rgb_image(&img)?;
    sample.name = path.display().to_string();
    Ok(sample)
}

/// Reads a mask as 0/1 values plus its original `(height, width)`; nonzero
/// pixels are anomalous. Resizing uses nearest-neighbour sampling.
pub fn read_mask(path: &Path, size: Option<usize>) -> Result<(Vec<u8>, (usize, usize))> {
    let img = image::open(path).map_err(|e| annotate(path, e))?.to_luma8();
    let original = (img.height() as usize, img.width() as usize);
    let img = match size {
        Some(s) if original != (s, s) => imageops::resize(&img, s as u32, s as u32, FilterType::Nearest),
        _ => img,
    };
    Ok((img.as_raw().iter().map(|&v| u8::from(v > 127)).collect(), original))
}
