//! 8-bit PNG images and label maps.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;

/// Label map as grayscale where each pixel value is the class id.
pub fn save_label_png(path: impl AsRef<Path>, label: &LabelMap) -> Result<()> {
    let img: GrayImage =
        ImageBuffer::from_raw(label.width as u32, label.height as u32, label.data.clone())
            .ok_or_else(|| Error::Data("label buffer size".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let img = image::open(path)?.into_luma8();
    LabelMap::new(img.height() as usize, img.width() as usize, img.into_raw())
}

/// Saves a `[c, n, n]` image with values in `[0, 1]`; three channels become
/// RGB, anything else is written as the first channel in grayscale.
pub fn save_image_png(
    path: impl AsRef<Path>,
    image: &[f32],
    channels: usize,
    size: usize,
) -> Result<()> {
    let plane = size * size;
    if image.len() != channels * plane {
        return Err(Error::Data(format!(
            "{} values for a {channels}x{size}x{size} image",
            image.len()
        )));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if channels == 3 {
        let img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let i = y as usize * size + x as usize;
            Rgb([q(image[i]), q(image[plane + i]), q(image[2 * plane + i])])
        });
        img.save(path)?;
    } else {
        let img = GrayImage::from_fn(size as u32, size as u32, |x, y| {
            Luma([q(image[y as usize * size + x as usize])])
        });
        img.save(path)?;
    }
    Ok(())
}

/// Loads a PNG as a `[3, h, w]` image scaled to `[0, 1]`; returns `(data, h, w)`.
pub fn load_image_png(path: impl AsRef<Path>) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + i] = p[c] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}
