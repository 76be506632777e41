//! Resampling descriptors for image patches.
//!
//! Per patch: luminance → 3×3 Laplacian prediction error (square root of
//! magnitude) → Radon projections at equally spaced angles in [0°, 180°)
//! → magnitude spectrum of each projection, lower half kept.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patches per side of the grid.
pub const GRID: usize = 8;
pub const PATCH_COUNT: usize = GRID * GRID;

const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Projection angles `A`.
    pub angles: usize,
    /// Radial bins `R` per projection; must be a power of two.
    pub bins: usize,
}

impl FeatureConfig {
    /// 10 angles × 32 bins → 160 values.
    pub const FULL: FeatureConfig = FeatureConfig { angles: 10, bins: 32 };
    /// 10 angles × 16 bins → 80 values.
    pub const DESK: FeatureConfig = FeatureConfig { angles: 10, bins: 16 };

    /// Spectrum bins kept per angle, `R / 2`.
    pub fn retained(&self) -> usize {
        self.bins / 2
    }

    pub fn dim(&self) -> usize {
        self.angles * self.retained()
    }

    pub fn validate(&self) -> Result<()> {
        if self.angles == 0 {
            return Err(Error::arg("at least one projection angle is required"));
        }
        if self.bins < 2 || !self.bins.is_power_of_two() {
            return Err(Error::arg(format!(
                "radial bin count must be a power of two ≥ 2, got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

/// Fixed-length non-negative descriptor of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplingFeatureVector(pub Tensor);

impl ResamplingFeatureVector {
    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The 8×8 row-major tiling of a square image.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Vec<Tensor>,
    pub patch_size: usize,
    pub source_side: usize,
}

impl PatchGrid {
    pub fn patch(&self, row: usize, col: usize) -> &Tensor {
        &self.patches[row * GRID + col]
    }

    /// Stitches the patches back into the source image.
    pub fn reassemble(&self) -> Tensor {
        let (p, s) = (self.patch_size, self.source_side);
        let mut out = Tensor::zeros(&[s, s, 3]);
        for (idx, patch) in self.patches.iter().enumerate() {
            let (gr, gc) = (idx / GRID, idx % GRID);
            for y in 0..p {
                let dst = ((gr * p + y) * s + gc * p) * 3;
                out.data_mut()[dst..dst + p * 3].copy_from_slice(&patch.data()[y * p * 3..][..p * 3]);
            }
        }
        out
    }
}

/// Splits an `[S, S, 3]` image into 64 non-overlapping `S/8`-sided patches.
pub fn extract_patches(image: &Tensor) -> Result<PatchGrid> {
    let (h, w, c) = image.dims3()?;
    if h != w || c != 3 {
        return Err(Error::shape(format!(
            "patch extraction needs a square RGB image, got {:?}",
            image.shape()
        )));
    }
    if h % GRID != 0 {
        return Err(Error::shape(format!("image side {h} is not divisible by {GRID}")));
    }
    let p = h / GRID;
    let mut patches = Vec::with_capacity(PATCH_COUNT);
    for gr in 0..GRID {
        for gc in 0..GRID {
            patches.push(crate::imaging::crop(image, gr * p, gc * p, p, p)?);
        }
    }
    Ok(PatchGrid {
        patches,
        patch_size: p,
        source_side: h,
    })
}

/// Square root of the absolute 3×3 Laplacian response of the patch's
/// luminance. Borders replicate the edge pixel so constant regions give
/// exactly zero everywhere.
pub fn laplacian_error(patch: &Tensor) -> Result<Tensor> {
    let (h, w, c) = patch.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("patch needs 3 channels, got {c}")));
    }
    let luma: Vec<f64> = patch
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut r = 0.0;
            for (dy, row) in LAPLACIAN.iter().enumerate() {
                for (dx, &k) in row.iter().enumerate() {
                    if k == 0.0 {
                        continue;
                    }
                    let iy = (y + dy).saturating_sub(1).min(h - 1);
                    let ix = (x + dx).saturating_sub(1).min(w - 1);
                    r += k * luma[iy * w + ix];
                }
            }
            out[y * w + x] = r.abs().sqrt();
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Radial bin of every pixel for each angle: `[angle][pixel]`.
fn radon_bins(h: usize, w: usize, angles: usize, bins: usize) -> Vec<Vec<usize>> {
    let side = h.max(w) as f64;
    let reach = side * std::f64::consts::SQRT_2 / 2.0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    (0..angles)
        .map(|a| {
            let theta = a as f64 * PI / angles as f64;
            let (sin, cos) = theta.sin_cos();
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let s = (x - cx) * cos + (cy - y) * sin;
                    let b = ((s + reach) / (2.0 * reach) * bins as f64).floor();
                    (b.max(0.0) as usize).min(bins - 1)
                })
                .collect()
        })
        .collect()
}

/// Sinogram `[A, R]`: for angle `θ_a = a·180°/A` every pixel adds its value
/// to the bin of its signed offset `s = x cos θ + y sin θ` from the map
/// centre, with `[-P√2/2, P√2/2]` split evenly into `R` bins.
pub fn radon(error_map: &Tensor, angles: usize, bins: usize) -> Result<Tensor> {
    let (h, w) = error_map.dims2()?;
    if angles == 0 {
        return Err(Error::arg("at least one projection angle is required"));
    }
    if bins < 2 {
        return Err(Error::arg("at least two radial bins are required"));
    }
    let assignment = radon_bins(h, w, angles, bins);
    let mut out = Tensor::zeros(&[angles, bins]);
    for (a, per_pixel) in assignment.iter().enumerate() {
        let row = &mut out.data_mut()[a * bins..][..bins];
        for (&b, &v) in per_pixel.iter().zip(error_map.data()) {
            row[b] += v;
        }
    }
    Ok(out)
}

/// Forward FFT of one fixed length, reusable across projections.
#[derive(Clone)]
pub struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    len: usize,
}

impl Spectrum {
    pub fn new(len: usize) -> Result<Self> {
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::arg(format!(
                "FFT length must be a power of two ≥ 2, got {len}"
            )));
        }
        Ok(Spectrum {
            fft: FftPlanner::new().plan_fft_forward(len),
            len,
        })
    }

    /// Magnitudes of DFT bins `0 .. len/2`.
    pub fn magnitudes(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.len {
            return Err(Error::shape(format!(
                "FFT planned for {} samples, got {}",
                self.len,
                signal.len()
            )));
        }
        let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[..self.len / 2].iter().map(|z| z.norm()).collect())
    }
}

/// Lower-half magnitude spectrum of a power-of-two-length projection.
pub fn fft_magnitude(projection: &Tensor) -> Result<Tensor> {
    if projection.rank() != 1 {
        return Err(Error::shape("projection must be one-dimensional"));
    }
    let spectrum = Spectrum::new(projection.len())?;
    Ok(Tensor::vector(spectrum.magnitudes(projection.data())?))
}

/// The full descriptor of one patch, `A · R/2` values.
pub fn patch_features(patch: &Tensor, config: &FeatureConfig) -> Result<ResamplingFeatureVector> {
    config.validate()?;
    let spectrum = Spectrum::new(config.bins)?;
    patch_features_with(patch, config, &spectrum)
}

fn patch_features_with(
    patch: &Tensor,
    config: &FeatureConfig,
    spectrum: &Spectrum,
) -> Result<ResamplingFeatureVector> {
    let errors = laplacian_error(patch)?;
    let sinogram = radon(&errors, config.angles, config.bins)?;
    let mut values = Vec::with_capacity(config.dim());
    for projection in sinogram.data().chunks_exact(config.bins) {
        values.extend(spectrum.magnitudes(projection)?);
    }
    Ok(ResamplingFeatureVector(Tensor::vector(values)))
}

/// Descriptors of all 64 patches in row-major grid order.
pub fn image_features(image: &Tensor, config: &FeatureConfig) -> Result<Vec<ResamplingFeatureVector>> {
    config.validate()?;
    let grid = extract_patches(image)?;
    let spectrum = Spectrum::new(config.bins)?;
    grid.patches
        .iter()
        .map(|p| patch_features_with(p, config, &spectrum))
        .collect()
}

const DUMP_MAGIC: &[u8; 4] = b"FRSF";
pub const DUMP_VERSION: u32 = 1;

/// Writes per-patch descriptors: `"FRSF"`, version u32, patch count u32,
/// then per patch its grid index u8, length u16 and f64 values, all
/// little-endian.
pub fn write_feature_dump(mut w: impl Write, features: &[ResamplingFeatureVector]) -> Result<()> {
    if features.len() > 256 {
        return Err(Error::arg("feature dump holds at most 256 patches"));
    }
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(features.len() as u32).to_le_bytes())?;
    for (idx, f) in features.iter().enumerate() {
        let len = u16::try_from(f.len()).map_err(|_| Error::arg("feature vector too long"))?;
        w.write_all(&[idx as u8])?;
        w.write_all(&len.to_le_bytes())?;
        for v in f.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dump written by [`write_feature_dump`]; returns `(grid index,
/// descriptor)` pairs in file order.
pub fn read_feature_dump(mut r: impl Read) -> Result<Vec<(u8, ResamplingFeatureVector)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("not a feature dump (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported feature dump version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut idx = [0u8; 1];
        r.read_exact(&mut idx)?;
        let mut lenbuf = [0u8; 2];
        r.read_exact(&mut lenbuf)?;
        let len = u16::from_le_bytes(lenbuf) as usize;
        let mut values = Vec::with_capacity(len);
        let mut f = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut f)?;
            values.push(f64::from_le_bytes(f));
        }
        out.push((idx[0], ResamplingFeatureVector(Tensor::vector(values))));
    }
    Ok(out)
}
