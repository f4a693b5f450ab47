use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]`, stored row-major as `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub category: String,
    /// Defect type directory (`good` for normal images).
    pub defect: String,
    /// Binary ground-truth anomaly mask, `H×W`, values 0 or 1.
    pub mask: Option<Vec<u8>>,
    pub is_anomalous: bool,
    pub name: String,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        let s = Self {
            height,
            width,
            pixels,
            category: String::new(),
            defect: "good".into(),
            mask: None,
            is_anomalous: false,
            name: String::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.height * self.width * 3 {
            return Err(Error::Input(format!(
                "pixel buffer of {} values does not match {}×{}×3",
                self.pixels.len(),
                self.height,
                self.width
            )));
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != self.height * self.width {
                return Err(Error::Input("mask size differs from image size".into()));
            }
        }
        Ok(())
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Mask as 0/1 values, all zeros for images without a mask.
    pub fn mask_or_zeros(&self) -> Vec<u8> {
        self.mask
            .clone()
            .unwrap_or_else(|| vec![0; self.height * self.width])
    }
}
