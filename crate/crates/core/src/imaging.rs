//! PNG I/O and the resampling helpers shared by the pipeline.
//!
//! Colour images are `[H, W, 3]` (or `[H, W, 4]` with alpha) tensors in
//! `[0, 1]`; masks are `[H, W]` tensors holding exactly 0.0 or 1.0.

use std::path::Path;

use image::{GrayImage, RgbImage, RgbaImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new(
        vec![h as usize, w as usize, 3],
        img.into_raw().into_iter().map(from_u8).collect(),
    )
}

pub fn load_rgba(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?.to_rgba8();
    let (w, h) = img.dimensions();
    Tensor::new(
        vec![h as usize, w as usize, 4],
        img.into_raw().into_iter().map(from_u8).collect(),
    )
}

/// Loads a grayscale mask; values ≥ 128 are manipulated.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    Tensor::new(
        vec![h as usize, w as usize],
        img.into_raw()
            .into_iter()
            .map(|v| if v >= 128 { 1.0 } else { 0.0 })
            .collect(),
    )
}

pub fn save_rgb(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("RGB image needs 3 channels, got {c}")));
    }
    let raw = image.data().iter().map(|&v| to_u8(v)).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    img.save(path.as_ref())?;
    Ok(())
}

pub fn save_rgba(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.dims3()?;
    if c != 4 {
        return Err(Error::shape(format!("RGBA image needs 4 channels, got {c}")));
    }
    let raw = image.data().iter().map(|&v| to_u8(v)).collect();
    let img = RgbaImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    img.save(path.as_ref())?;
    Ok(())
}

/// Writes a binary mask as 0/255 grayscale.
pub fn save_mask(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    let (h, w) = mask.dims2()?;
    let raw = mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    img.save(path.as_ref())?;
    Ok(())
}

/// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| from_u8(to_u8(v)))
}

/// Copies the `height × width` window at `(top, left)` out of an
/// `[H, W, ...]` tensor.
pub fn crop(t: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    if t.rank() < 2 {
        return Err(Error::shape("crop needs at least two axes"));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(Error::arg(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let inner: usize = t.shape()[2..].iter().product();
    let mut data = Vec::with_capacity(height * width * inner);
    for y in top..top + height {
        data.extend_from_slice(&t.data()[(y * w + left) * inner..][..width * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = height;
    shape[1] = width;
    Tensor::new(shape, data)
}

/// Bilinear resize of an `[H, W, C]` tensor with half-pixel centres and
/// edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    let mut px = vec![0.0; c];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            sample_bilinear(image, fy, fx, &mut px);
            for (ch, v) in px.iter().enumerate() {
                out.set3(oy, ox, ch, *v);
            }
        }
    }
    Ok(out)
}

/// Bilinear sample at fractional `(y, x)`, clamped to the image.
pub fn sample_bilinear(image: &Tensor, y: f64, x: f64, out: &mut [f64]) {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    for ch in 0..c.min(out.len()) {
        let top = image.at3(y0, x0, ch) * (1.0 - tx) + image.at3(y0, x1, ch) * tx;
        let bottom = image.at3(y1, x0, ch) * (1.0 - tx) + image.at3(y1, x1, ch) * tx;
        out[ch] = top * (1.0 - ty) + bottom * ty;
    }
}

/// Nearest-neighbour resize of a mask, re-thresholded at 0.5.
pub fn resize_mask_nearest(mask: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = mask.dims2()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target must be non-empty"));
    }
    Ok(Tensor::from_fn(&[out_h, out_w], |i| {
        let (oy, ox) = (i / out_w, i % out_w);
        let y = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let x = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        if mask.at2(y, x) >= 0.5 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Checks that every mask value is exactly 0 or 1.
pub fn expect_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::arg("mask is not binary"));
    }
    Ok(())
}
