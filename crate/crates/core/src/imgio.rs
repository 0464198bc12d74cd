//! PNG load/save with the canonical [-1, 1] <-> [0, 255] pixel mapping
//! (affine transform, round half to even).

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

pub fn quantize(v: f64) -> u8 {
    let scaled = (v + 1.0) / 2.0 * 255.0;
    scaled.round_ties_even().clamp(0.0, 255.0) as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0 * 2.0 - 1.0
}

/// Writes a `[3, H, W]` tensor in [-1, 1] as an RGB PNG.
pub fn save_image(pixels: ArrayView3<'_, f64>, path: &Path) -> Result<()> {
    let (c, h, w) = pixels.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (hi, wi) = (y as usize, x as usize);
        *px = Rgb([
            quantize(pixels[[0, hi, wi]]),
            quantize(pixels[[1, hi, wi]]),
            quantize(pixels[[2, hi, wi]]),
        ]);
    }
    img.save(path)?;
    Ok(())
}

/// Writes a `[1, H, W]` binary mask as a grayscale PNG (0 or 255).
pub fn save_mask(mask: ArrayView3<'_, f64>, path: &Path) -> Result<()> {
    let (c, h, w) = mask.dim();
    if c != 1 {
        return Err(Error::shape(format!("expected 1 channel mask, got {c}")));
    }
    let mut img = ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = image::Luma([if mask[[0, y as usize, x as usize]] > 0.5 { 255 } else { 0 }]);
    }
    img.save(path)?;
    Ok(())
}

/// Loads an RGB PNG into a `[3, H, W]` tensor in [-1, 1].
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = dequantize(px.0[c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_is_affine_with_even_ties() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        // (v + 1) / 2 * 255 = 0.5 at v = -254/255 exactly -> rounds to 0 (even)
        assert_eq!(quantize(-1.0 + 1.0 / 255.0), 0);
        assert_eq!(quantize(2.0), 255); // clamped
    }

    #[test]
    fn round_trip_error_bounded_by_half_step() {
        for q in 0..=255u8 {
            assert_eq!(quantize(dequantize(q)), q);
        }
    }
}
