//! 8-bit PNG rendering of heatmaps and highlight overlays.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::saliency::BinaryMask;
use crate::tensor::Tensor;

/// Color painted over highlighted pixels.
pub const HIGHLIGHT_COLOR: [u8; 3] = [255, 32, 32];
/// Opacity of the highlight layer.
pub const HIGHLIGHT_ALPHA: f32 = 0.6;

/// Min-max normalizes an `[H,W]` tensor to 0..=255. A constant map renders
/// black.
pub fn heatmap_image(values: &Tensor) -> Result<GrayImage> {
    let (h, w) = values.dims2()?;
    let data = values.data();
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = data[y as usize * w + x as usize];
        let level = if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 };
        Luma([level.round().clamp(0.0, 255.0) as u8])
    }))
}

/// Blends the highlight color over `base` wherever `mask` is set.
pub fn overlay(base: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    let (h, w) = mask.shape();
    if (base.width() as usize, base.height() as usize) != (w, h) {
        return Err(Error::dim(format!(
            "overlay base is {}x{}, mask is {w}x{h}",
            base.width(),
            base.height()
        )));
    }
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.is_set(y as usize * w + x as usize) {
            for (c, &color) in px.0.iter_mut().zip(&HIGHLIGHT_COLOR) {
                *c = (*c as f32 * (1.0 - HIGHLIGHT_ALPHA) + color as f32 * HIGHLIGHT_ALPHA).round() as u8;
            }
        }
    }
    Ok(out)
}

/// Converts a `[C,H,W]` image with values in `[0,1]` (C = 1 or 3) to RGB.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!("cannot render {c}-channel image")));
    }
    let data = image.data();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_u8(data[(ch.min(c - 1) * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    }))
}

fn gray_to_rgb(gray: &GrayImage) -> RgbImage {
    RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = gray.get_pixel(x, y).0[0];
        Rgb([v, v, v])
    })
}

/// Highlight overlay on the source image when given, otherwise on the
/// grayscale rendering of `heatmap`.
pub fn highlight_image(heatmap: &Tensor, mask: &BinaryMask, source: Option<&Tensor>) -> Result<RgbImage> {
    let base = match source {
        Some(img) => tensor_to_rgb(img)?,
        None => gray_to_rgb(&heatmap_image(heatmap)?),
    };
    overlay(&base, mask)
}

pub fn save_heatmap(path: &Path, values: &Tensor) -> Result<()> {
    heatmap_image(values)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_highlight(path: &Path, heatmap: &Tensor, mask: &BinaryMask, source: Option<&Tensor>) -> Result<()> {
    highlight_image(heatmap, mask, source)?
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
