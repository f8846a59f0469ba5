//! PNG helpers: tensor <-> image conversion and grid sheets.

use image::{Rgb, RgbImage};
use ndarray::prelude::*;
use std::path::Path;

use crate::error::{Error, Result};

/// Convert one (3, H, W) tensor in [0,1] to an RGB image, clamping.
pub fn to_rgb8(img: &ArrayView3<f64>) -> RgbImage {
    let (_, h, w) = img.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out
}

pub fn save_image(img: &ArrayView3<f64>, path: impl AsRef<Path>) -> Result<()> {
    to_rgb8(img).save(path)?;
    Ok(())
}

const SEPARATOR: u32 = 2;

/// Assemble a (B, 3, H, W) batch into a row-major grid sheet with 2-px
/// separators and save it as PNG.
pub fn save_grid(batch: &Array4<f64>, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let (b, _, h, w) = batch.dim();
    if b == 0 || cols == 0 {
        return Err(Error::config("grid needs at least one image and column"));
    }
    let rows = b.div_ceil(cols);
    let sheet_w = cols as u32 * w as u32 + (cols as u32 - 1) * SEPARATOR;
    let sheet_h = rows as u32 * h as u32 + (rows as u32 - 1) * SEPARATOR;
    let mut sheet = RgbImage::from_pixel(sheet_w, sheet_h, Rgb([0, 0, 0]));
    for i in 0..b {
        let (r, c) = (i / cols, i % cols);
        let tile = to_rgb8(&batch.slice(s![i, .., .., ..]));
        let ox = c as u32 * (w as u32 + SEPARATOR);
        let oy = r as u32 * (h as u32 + SEPARATOR);
        image::imageops::overlay(&mut sheet, &tile, ox as i64, oy as i64);
    }
    sheet.save(path)?;
    Ok(())
}
