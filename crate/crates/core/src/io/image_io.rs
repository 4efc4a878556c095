use std::path::Path;

use image::{GrayAlphaImage, GrayImage, LumaA, Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

/// Channel layout used when writing images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    #[default]
    Gray,
    Rgb,
}

impl std::str::FromStr for ColorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(ColorMode::Gray),
            "rgb" => Ok(ColorMode::Rgb),
            _ => Err(Error::invalid(format!("unknown color mode {s:?}"))),
        }
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn luma(p: &[f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Loads an 8-bit image; grayscale inputs are replicated to three channels.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let rgb = img.to_rgb8();
    Ok(Image {
        width: rgb.width(),
        height: rgb.height(),
        pixels: rgb
            .pixels()
            .map(|p| {
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ]
            })
            .collect(),
    })
}

/// Writes an 8-bit PNG, optionally with an opacity channel.
pub fn save_image(img: &Image, mode: ColorMode, alpha: Option<&[f64]>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (w, h) = (img.width, img.height);
    let px = |i: u32, j: u32| img.pixels[(j * w + i) as usize];
    let a = |i: u32, j: u32| alpha.map(|a| to_u8(a[(j * w + i) as usize]));
    let res = match (mode, alpha.is_some()) {
        (ColorMode::Gray, false) => {
            GrayImage::from_fn(w, h, |i, j| image::Luma([to_u8(luma(&px(i, j)))])).save(path)
        }
        (ColorMode::Gray, true) => GrayAlphaImage::from_fn(w, h, |i, j| {
            LumaA([to_u8(luma(&px(i, j))), a(i, j).unwrap()])
        })
        .save(path),
        (ColorMode::Rgb, false) => RgbImage::from_fn(w, h, |i, j| {
            let p = px(i, j);
            Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        })
        .save(path),
        (ColorMode::Rgb, true) => RgbaImage::from_fn(w, h, |i, j| {
            let p = px(i, j);
            Rgba([to_u8(p[0]), to_u8(p[1]), to_u8(p[2]), a(i, j).unwrap()])
        })
        .save(path),
    };
    res.map_err(|e| image_err(path, e))
}

/// Pixels ≥ 128 in the first channel are foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    Ok(Mask {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(|p| p[0] >= 128).collect(),
    })
}

/// Writes a mask as an 8-bit image with values 0 and 255.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    GrayImage::from_fn(mask.width, mask.height, |i, j| {
        image::Luma([if mask.get(i, j) { 255 } else { 0 }])
    })
    .save(path)
    .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m/mask.png");
        let mut m = Mask::new(5, 3);
        m.data[3] = true;
        m.data[14] = true;
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
        let raw = image::open(&p).unwrap().to_luma8();
        assert!(raw.pixels().all(|v| v[0] == 0 || v[0] == 255));
    }

    #[test]
    fn gray_and_rgb_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 2);
        img.set(1, 1, [0.2, 0.4, 0.6]);
        img.set(3, 0, [1.0, 1.0, 1.0]);
        let p = dir.path().join("rgb.png");
        save_image(&img, ColorMode::Rgb, None, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.get(1, 1), [51.0 / 255.0, 102.0 / 255.0, 153.0 / 255.0]);
        let p = dir.path().join("gray.png");
        let alpha = vec![0.5; 8];
        save_image(&img, ColorMode::Gray, Some(&alpha), &p).unwrap();
        let raw = image::open(&p).unwrap();
        assert_eq!(raw.color(), image::ColorType::La8);
        let back = load_image(&p).unwrap();
        assert_eq!(back.get(3, 0), [1.0; 3]);
    }
}
