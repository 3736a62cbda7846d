//! PNG output for images, masks, heatmaps and triptychs.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::Result;
use crate::patchgrid::ImageTensor;
use crate::scoring::hstack;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image with values in `[0, 1]`.
pub fn save_image_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w, c) = image.pixels().dim();
    let px = image.pixels();
    if c == 1 {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(px[[y as usize, x as usize, 0]] as f64)]));
        img.save(path)?;
    } else {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            Rgb([0, 1, 2].map(|ch| to_u8(px[[y, x, ch]] as f64)))
        });
        img.save(path)?;
    }
    Ok(())
}

pub fn save_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]))
        .save(path)?;
    Ok(())
}

/// Grayscale heatmap of a map with values in `[0, 1]`.
pub fn save_heatmap_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(map[[y as usize, x as usize]])]))
        .save(path)?;
    Ok(())
}

/// Masked input, reconstruction and original side by side.
pub fn save_triptych_png(
    path: &Path,
    masked: &ImageTensor,
    reconstruction: &ImageTensor,
    original: &ImageTensor,
) -> Result<()> {
    let strip = hstack(&[masked, &reconstruction.clamped(), original])?;
    save_image_png(path, &strip)
}
