//! In-memory images and masks.

use crate::error::{Error, Result};

/// Linear RGB image with values nominally in `[0, 1]`. Grayscale images are
/// stored with three equal channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: [f64; 3]) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn get(&self, i: u32, j: u32) -> [f64; 3] {
        self.pixels[(j * self.width + i) as usize]
    }

    pub fn set(&mut self, i: u32, j: u32, v: [f64; 3]) {
        self.pixels[(j * self.width + i) as usize] = v;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Mean squared error over pixels and channels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if !self.same_size(other) {
            return Err(Error::invalid(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
            .sum();
        Ok(sum / (3 * self.pixels.len()) as f64)
    }
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn get(&self, i: u32, j: u32) -> bool {
        self.data[(j * self.width + i) as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::invalid("mask sizes differ"));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }
}

/// Capped value reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// PSNR in dB for signals on a `[0, 1]` scale.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_definition() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
        let a = Image::filled(4, 4, [0.0; 3]);
        let b = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr_from_mse(a.mse(&b).unwrap()), 0.0);
    }

    #[test]
    fn iou_counts() {
        let mut a = Mask::new(2, 2);
        let mut b = Mask::new(2, 2);
        assert_eq!(a.iou(&b).unwrap(), 1.0);
        a.data = vec![true, true, false, false];
        b.data = vec![true, false, true, false];
        assert!((a.iou(&b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }
}
