//! Splice-manipulated images with exact ground-truth masks.
//!
//! Segmented objects (RGBA, binary alpha) are scaled, rotated and hard
//! composited onto 1024×1024 corner crops of source images, twice per
//! output image and never touching each other.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, crop, from_u8, sample_bilinear, to_u8};
use crate::tensor::Tensor;
use crate::training::{split_dataset, write_manifest, LabeledSample, ManifestRecord, Split};

pub const CROP_SIDE: usize = 1024;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// An object cut out of a photograph.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedObject {
    /// `[h, w, 4]`; alpha is exactly 0 or 1 and its bounding box is the
    /// whole patch.
    pub rgba: Tensor,
    pub id: String,
    pub category: String,
}

impl SegmentedObject {
    pub fn new(rgba: Tensor, id: impl Into<String>, category: impl Into<String>) -> Result<Self> {
        let (h, w, c) = rgba.dims3()?;
        if c != 4 {
            return Err(Error::shape(format!("object needs 4 channels, got {c}")));
        }
        let alpha = |y: usize, x: usize| rgba.at3(y, x, 3);
        if rgba.data().chunks_exact(4).any(|p| p[3] != 0.0 && p[3] != 1.0) {
            return Err(Error::arg("object alpha is not binary"));
        }
        let row_hit = |y: usize| (0..w).any(|x| alpha(y, x) == 1.0);
        let col_hit = |x: usize| (0..h).any(|y| alpha(y, x) == 1.0);
        if !(row_hit(0) && row_hit(h - 1) && col_hit(0) && col_hit(w - 1)) {
            return Err(Error::arg("object alpha does not touch all four patch edges"));
        }
        Ok(SegmentedObject {
            rgba,
            id: id.into(),
            category: category.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.rgba.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgba.shape()[1]
    }

    /// Reads an RGBA PNG; alpha ≥ 128 counts as object.
    pub fn load(path: impl AsRef<Path>, category: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let mut rgba = imaging::load_rgba(path)?;
        for p in rgba.data_mut().chunks_exact_mut(4) {
            p[3] = if p[3] >= from_u8(128) { 1.0 } else { 0.0 };
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(rgba, id, category)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        imaging::save_rgba(path, &self.rgba)
    }
}

/// Cuts the object under a binary annotation mask out of an image, cropped
/// to the mask's bounding box.
pub fn import_object(
    image: &Tensor,
    mask: &Tensor,
    id: impl Into<String>,
    category: impl Into<String>,
) -> Result<SegmentedObject> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("source image needs 3 channels, got {c}")));
    }
    mask.expect_shape(&[h, w])?;
    imaging::expect_binary(mask)?;
    let (top, left, bh, bw) =
        bounding_box(mask).ok_or_else(|| Error::arg("annotation mask is empty"))?;
    let mut rgba = Tensor::zeros(&[bh, bw, 4]);
    for y in 0..bh {
        for x in 0..bw {
            for ch in 0..3 {
                rgba.set3(y, x, ch, image.at3(top + y, left + x, ch));
            }
            rgba.set3(y, x, 3, mask.at2(top + y, left + x));
        }
    }
    SegmentedObject::new(rgba, id, category)
}

/// `(top, left, height, width)` of the nonzero pixels of a mask.
pub fn bounding_box(mask: &Tensor) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let inner: usize = mask.shape()[2..].iter().product();
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.data()[(y * w + x) * inner + inner - 1] != 0.0 {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    (y0 != usize::MAX).then(|| (y0, x0, y1 - y0 + 1, x1 - x0 + 1))
}

/// The four corner-anchored `side × side` windows of an image, or none
/// (with a warning) when the image is smaller than `side`.
pub fn corner_crops(image: &Tensor, side: usize) -> Result<Vec<Tensor>> {
    let (h, w, _) = image.dims3()?;
    if h < side || w < side {
        log::warn!("skipping {h}×{w} image: smaller than {side}×{side}");
        return Ok(Vec::new());
    }
    [(0, 0), (0, w - side), (h - side, 0), (h - side, w - side)]
        .iter()
        .map(|&(t, l)| crop(image, t, l, side, side))
        .collect()
}

/// Where and how one object was pasted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceRecord {
    pub object_id: String,
    pub scale: f64,
    pub rotation_degrees: f64,
    /// Top-left corner of the pasted region's bounding box.
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Pixels written by this paste.
    pub pixels: usize,
}

/// A scaled and rotated object: colour and binary alpha, cropped tight.
#[derive(Debug, Clone)]
pub struct TransformedObject {
    pub rgb: Tensor,
    pub alpha: Tensor,
}

/// Inverse-maps every destination pixel centre into the object: alpha by
/// nearest neighbour, colour bilinearly.
pub fn transform_object(object: &SegmentedObject, scale: f64, rotation_degrees: f64) -> Result<TransformedObject> {
    if !(scale > 0.0 && scale.is_finite()) || !rotation_degrees.is_finite() {
        return Err(Error::arg(format!(
            "scale must be positive and finite, got {scale} (rotation {rotation_degrees})"
        )));
    }
    let (oh, ow) = (object.height() as f64, object.width() as f64);
    let theta = rotation_degrees * PI / 180.0;
    let (sin, cos) = theta.sin_cos();
    let fh = (scale * (oh * cos.abs() + ow * sin.abs()) - 1e-9).ceil().max(1.0) as usize;
    let fw = (scale * (ow * cos.abs() + oh * sin.abs()) - 1e-9).ceil().max(1.0) as usize;
    let mut rgb = Tensor::zeros(&[fh, fw, 3]);
    let mut alpha = Tensor::zeros(&[fh, fw]);
    let mut px = [0.0; 3];
    for y in 0..fh {
        let dy = y as f64 + 0.5 - fh as f64 / 2.0;
        for x in 0..fw {
            let dx = x as f64 + 0.5 - fw as f64 / 2.0;
            let u = (cos * dy - sin * dx) / scale + oh / 2.0;
            let v = (sin * dy + cos * dx) / scale + ow / 2.0;
            if u < 0.0 || v < 0.0 || u >= oh || v >= ow {
                continue;
            }
            let (iy, ix) = (u as usize, v as usize);
            if object.rgba.at3(iy, ix, 3) != 1.0 {
                continue;
            }
            sample_bilinear(&object.rgba, u - 0.5, v - 0.5, &mut px);
            alpha.data_mut()[y * fw + x] = 1.0;
            for (ch, &c) in px.iter().enumerate() {
                rgb.set3(y, x, ch, from_u8(to_u8(c)));
            }
        }
    }
    let (t, l, h, w) = bounding_box(&alpha)
        .ok_or_else(|| Error::Placement(format!("object {} vanished after scaling", object.id)))?;
    Ok(TransformedObject {
        rgb: crop(&rgb, t, l, h, w)?,
        alpha: crop(&alpha, t, l, h, w)?,
    })
}

fn touches(occupied: &Tensor, alpha: &Tensor, top: usize, left: usize) -> bool {
    let (h, w) = (occupied.shape()[0], occupied.shape()[1]);
    let (ah, aw) = (alpha.shape()[0], alpha.shape()[1]);
    for y in 0..ah {
        for x in 0..aw {
            if alpha.data()[y * aw + x] != 1.0 {
                continue;
            }
            let (cy, cx) = (top + y, left + x);
            for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    if occupied.at2(ny, nx) == 1.0 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Result of one paste.
#[derive(Debug, Clone)]
pub struct Splice {
    pub image: Tensor,
    /// Union of `occupied` and the new footprint.
    pub mask: Tensor,
    pub record: SpliceRecord,
}

/// Pastes a transformed object onto `canvas`. With `position = None` the
/// top-left corner is drawn uniformly among placements that fit, retrying
/// until the footprint stays at least one pixel away from `occupied`.
pub fn splice(
    canvas: &Tensor,
    occupied: &Tensor,
    object: &SegmentedObject,
    scale: f64,
    rotation_degrees: f64,
    position: Option<(usize, usize)>,
    rng: &mut impl Rng,
) -> Result<Splice> {
    let (h, w, _) = canvas.dims3()?;
    occupied.expect_shape(&[h, w])?;
    let t = transform_object(object, scale, rotation_degrees)?;
    let (ah, aw) = (t.alpha.shape()[0], t.alpha.shape()[1]);
    if ah > h || aw > w {
        return Err(Error::Placement(format!(
            "object {} is {ah}×{aw} after transform, canvas is {h}×{w}",
            object.id
        )));
    }
    let (top, left) = match position {
        Some((top, left)) => {
            if top + ah > h || left + aw > w {
                return Err(Error::Placement(format!(
                    "{ah}×{aw} object at ({top}, {left}) leaves the {h}×{w} canvas"
                )));
            }
            if touches(occupied, &t.alpha, top, left) {
                return Err(Error::Placement(format!(
                    "object {} at ({top}, {left}) overlaps an earlier splice",
                    object.id
                )));
            }
            (top, left)
        }
        None => (0..MAX_PLACEMENT_ATTEMPTS)
            .map(|_| (rng.gen_range(0..=h - ah), rng.gen_range(0..=w - aw)))
            .find(|&(top, left)| !touches(occupied, &t.alpha, top, left))
            .ok_or_else(|| {
                Error::Placement(format!(
                    "no free spot for object {} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                    object.id
                ))
            })?,
    };
    let mut image = canvas.clone();
    let mut mask = occupied.clone();
    let mut pixels = 0;
    for y in 0..ah {
        for x in 0..aw {
            if t.alpha.data()[y * aw + x] != 1.0 {
                continue;
            }
            pixels += 1;
            mask.data_mut()[(top + y) * w + left + x] = 1.0;
            for ch in 0..3 {
                image.set3(top + y, left + x, ch, t.rgb.at3(y, x, ch));
            }
        }
    }
    Ok(Splice {
        image,
        mask,
        record: SpliceRecord {
            object_id: object.id.clone(),
            scale,
            rotation_degrees,
            top,
            left,
            height: ah,
            width: aw,
            pixels,
        },
    })
}

/// Recomputes the footprint of a list of splices from the records alone.
pub fn footprint(
    side: (usize, usize),
    records: &[SpliceRecord],
    objects: &[SegmentedObject],
) -> Result<Tensor> {
    let mut mask = Tensor::zeros(&[side.0, side.1]);
    for r in records {
        let object = objects
            .iter()
            .find(|o| o.id == r.object_id)
            .ok_or_else(|| Error::arg(format!("unknown object {}", r.object_id)))?;
        let t = transform_object(object, r.scale, r.rotation_degrees)?;
        let aw = t.alpha.shape()[1];
        for (i, &a) in t.alpha.data().iter().enumerate() {
            if a == 1.0 {
                mask.data_mut()[(r.top + i / aw) * side.1 + r.left + i % aw] = 1.0;
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub enum Source {
    File(PathBuf),
    Memory { id: String, image: Tensor },
}

impl Source {
    pub fn id(&self) -> String {
        match self {
            Source::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            Source::Memory { id, .. } => id.clone(),
        }
    }

    fn load(&self) -> Result<Tensor> {
        match self {
            Source::File(p) => imaging::load_rgb(p),
            Source::Memory { image, .. } => Ok(image.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub per_crop_objects: usize,
    pub pastes_per_image: usize,
    pub crop_side: usize,
    pub scale_range: (f64, f64),
    pub rotation_range_degrees: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            per_crop_objects: 6,
            pastes_per_image: 2,
            crop_side: CROP_SIDE,
            scale_range: (0.5, 1.5),
            rotation_range_degrees: 30.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusReport {
    pub records: Vec<ManifestRecord>,
    pub skipped: Vec<String>,
    pub manifest: PathBuf,
}

/// Name of the manifest written by [`generate_corpus`].
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Generates `per_crop_objects` spliced images per corner crop of every
/// source, writing `<source>_c<k>_<n>.png` and `..._mask.png` into
/// `out_dir` plus a JSON-lines manifest. Each image has its own random
/// stream, so the output is independent of scheduling.
pub fn generate_corpus(
    sources: &[Source],
    objects: &[SegmentedObject],
    config: &CorpusConfig,
    out_dir: &Path,
) -> Result<CorpusReport> {
    if objects.is_empty() {
        return Err(Error::arg("object library is empty"));
    }
    if sources.is_empty() {
        return Err(Error::arg("no source images"));
    }
    if config.per_crop_objects == 0 || config.pastes_per_image == 0 {
        return Err(Error::arg("objects per crop and pastes per image must be positive"));
    }
    let (lo, hi) = config.scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::arg(format!("bad scale range [{lo}, {hi}]")));
    }
    std::fs::create_dir_all(out_dir)?;

    let per_source: Vec<Result<(Vec<ManifestRecord>, Option<String>)>> = sources
        .par_iter()
        .enumerate()
        .map(|(si, source)| {
            let id = source.id();
            let image = source.load()?;
            let crops = corner_crops(&image, config.crop_side)?;
            if crops.is_empty() {
                return Ok((Vec::new(), Some(id)));
            }
            let mut records = Vec::new();
            for (ci, canvas) in crops.iter().enumerate() {
                let canvas = imaging::quantize(canvas);
                let picks = {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream(((si as u64) << 8) | ci as u64);
                    if objects.len() >= config.per_crop_objects {
                        sample(&mut rng, objects.len(), config.per_crop_objects).into_vec()
                    } else {
                        (0..config.per_crop_objects).map(|k| k % objects.len()).collect()
                    }
                };
                for (k, &oi) in picks.iter().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream((1 << 40) | ((si as u64) << 16) | ((ci as u64) << 8) | k as u64);
                    let object = &objects[oi];
                    let mut img = canvas.clone();
                    let mut mask = Tensor::zeros(&[config.crop_side, config.crop_side]);
                    let mut splices = Vec::new();
                    for _ in 0..config.pastes_per_image {
                        let scale = rng.gen_range(lo..=hi);
                        let rot = rng.gen_range(
                            -config.rotation_range_degrees..=config.rotation_range_degrees,
                        );
                        let s = splice(&img, &mask, object, scale, rot, None, &mut rng)
                            .map_err(|e| Error::Stage {
                                stage: "splice",
                                source: Box::new(Error::Placement(format!("{id} crop {ci}: {e}"))),
                            })?;
                        img = s.image;
                        mask = s.mask;
                        splices.push(s.record);
                    }
                    let stem = format!("{id}_c{ci}_{k}");
                    let image_name = PathBuf::from(format!("{stem}.png"));
                    let mask_name = PathBuf::from(format!("{stem}_mask.png"));
                    imaging::save_rgb(out_dir.join(&image_name), &img)?;
                    imaging::save_mask(out_dir.join(&mask_name), &mask)?;
                    records.push(ManifestRecord {
                        image: image_name,
                        mask: mask_name,
                        split: Split::Train,
                        source_id: id.clone(),
                        splices,
                        seed: Some(config.seed),
                    });
                }
            }
            Ok((records, None))
        })
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for r in per_source {
        let (recs, skip) = r?;
        records.extend(recs);
        skipped.extend(skip);
    }
    if !records.is_empty() {
        assign_splits(&mut records, config.seed)?;
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(BufWriter::new(File::create(&manifest)?), &records)?;
    Ok(CorpusReport {
        records,
        skipped,
        manifest,
    })
}

/// Tags records with a seeded 70/5/25 train / validation / test split.
pub fn assign_splits(records: &mut [ManifestRecord], seed: u64) -> Result<()> {
    let idx: Vec<usize> = (0..records.len()).collect();
    let (train, val, test) = split_dataset(&idx, seed)?;
    for (set, tag) in [(train, Split::Train), (val, Split::Validation), (test, Split::Test)] {
        for i in set {
            records[i].split = tag;
        }
    }
    Ok(())
}

/// A textured background with sensor-like noise, on the 8-bit grid.
pub fn procedural_canvas(height: usize, width: usize, rng: &mut impl Rng) -> Tensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)));
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.01..0.15),
                rng.gen_range(0.0..PI),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.02..0.08),
            )
        })
        .collect();
    let mut out = Tensor::zeros(&[height, width, 3]);
    let (fh, fw) = (height.max(1) as f64, width.max(1) as f64);
    for y in 0..height {
        for x in 0..width {
            let mut texture = 0.0;
            for &(freq, dir, phase, amp) in &waves {
                let s = x as f64 * dir.cos() + y as f64 * dir.sin();
                texture += amp * (2.0 * PI * freq * s + phase).sin();
            }
            for ch in 0..3 {
                let noise = rng.gen_range(-0.04..0.04);
                let v = base[ch] + grad[ch].0 * y as f64 / fh + grad[ch].1 * x as f64 / fw + texture + noise;
                out.set3(y, x, ch, from_u8(to_u8(v)));
            }
        }
    }
    out
}

/// A star-shaped blob with striped colour, roughly `size` pixels across.
pub fn procedural_object(id: impl Into<String>, size: usize, rng: &mut impl Rng) -> Result<SegmentedObject> {
    if size < 3 {
        return Err(Error::arg("procedural objects need a size of at least 3"));
    }
    let r0 = size as f64 / 2.0;
    let lobes = rng.gen_range(2..6) as f64;
    let depth = rng.gen_range(0.0..0.3);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let aspect = rng.gen_range(0.7..1.0);
    let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let stripe = rng.gen_range(2.0..6.0);
    let mut rgba = Tensor::zeros(&[size, size, 4]);
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 + 0.5 - r0) / aspect;
            let dx = x as f64 + 0.5 - r0;
            let radius = r0 * (1.0 - depth * (0.5 + 0.5 * (lobes * dy.atan2(dx) + phase).sin()));
            if (dy * dy + dx * dx).sqrt() > radius {
                continue;
            }
            let band = if ((x + y) as f64 / stripe) as usize % 2 == 0 { 0.15 } else { -0.15 };
            for ch in 0..3 {
                let v = colour[ch] + band + rng.gen_range(-0.03..0.03);
                rgba.set3(y, x, ch, from_u8(to_u8(v)));
            }
            rgba.set3(y, x, 3, 1.0);
        }
    }
    let (t, l, h, w) = bounding_box(&rgba).ok_or_else(|| Error::arg("empty procedural object"))?;
    SegmentedObject::new(crop(&rgba, t, l, h, w)?, id, "procedural")
}

/// Small spliced samples for quick experiments: one object pasted twice
/// onto a `side × side` procedural canvas.
pub fn desk_samples(count: usize, side: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let canvas = procedural_canvas(side, side, &mut rng);
            let object = procedural_object(format!("obj{i}"), (side / 8).max(3), &mut rng)?;
            let mut image = canvas;
            let mut mask = Tensor::zeros(&[side, side]);
            for _ in 0..2 {
                let scale = rng.gen_range(0.75..1.25);
                let rot = rng.gen_range(-30.0..30.0);
                let s = splice(&image, &mask, &object, scale, rot, None, &mut rng)?;
                image = s.image;
                mask = s.mask;
            }
            LabeledSample::new(image, mask, format!("desk{i}"), Split::Train)
        })
        .collect()
}
