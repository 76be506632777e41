//! Dataset preparation, weighted cross-entropy, Adam and the training loop.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasynth::SpliceRecord;
use crate::error::{Error, Result};
use crate::imaging::{crop, expect_binary, resize_bilinear, resize_mask_nearest};
use crate::network::{Model, ModelInput, ModelParams, Profile};
use crate::nn::Mode;
use crate::tensor::{Neumaier, Tensor};

/// Probabilities below this are clamped before taking the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// An image with its binary manipulation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[S, S, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// `[S, S]`, 1 = manipulated.
    pub mask: Tensor,
    pub source_id: String,
    pub split: Split,
}

impl LabeledSample {
    pub fn new(image: Tensor, mask: Tensor, source_id: impl Into<String>, split: Split) -> Result<Self> {
        let (h, w, c) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("sample image needs 3 channels, got {c}")));
        }
        mask.expect_shape(&[h, w])?;
        expect_binary(&mask)?;
        Ok(LabeledSample {
            image,
            mask,
            source_id: source_id.into(),
            split,
        })
    }

    /// Bilinear image / nearest mask resize to `side × side`.
    pub fn resized(&self, side: usize) -> Result<Self> {
        let (h, w, _) = self.image.dims3()?;
        if h == side && w == side {
            return Ok(self.clone());
        }
        Ok(LabeledSample {
            image: resize_bilinear(&self.image, side, side)?,
            mask: resize_mask_nearest(&self.mask, side, side)?,
            source_id: self.source_id.clone(),
            split: self.split,
        })
    }
}

/// One line of a JSON-lines sample manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splices: Vec<SpliceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn write_manifest(mut w: impl Write, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(r: impl BufRead) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Resolves manifest paths relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = read_manifest(std::io::BufReader::new(file))?;
    for r in &mut records {
        if r.image.is_relative() {
            r.image = base.join(&r.image);
        }
        if r.mask.is_relative() {
            r.mask = base.join(&r.mask);
        }
    }
    Ok(records)
}

pub fn load_sample(record: &ManifestRecord) -> Result<LabeledSample> {
    let image = crate::imaging::load_rgb(&record.image)?;
    let mask = crate::imaging::load_mask(&record.mask)?;
    LabeledSample::new(image, mask, record.source_id.clone(), record.split)
}

/// Sizes of a 70/5/25 partition of `n` items, largest-remainder rounding
/// with ties going to the earlier part.
pub fn split_sizes(n: usize) -> [usize; 3] {
    const PERCENT: [usize; 3] = [70, 5, 25];
    let mut sizes = PERCENT.map(|p| n * p / 100);
    let mut rems: Vec<(usize, usize)> = PERCENT.iter().map(|p| (n * p % 100, 0)).collect();
    for (i, r) in rems.iter_mut().enumerate() {
        r.1 = i;
    }
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = n - sizes.iter().sum::<usize>();
    for &(_, i) in rems.iter().take(missing) {
        sizes[i] += 1;
    }
    sizes
}

/// Seeded shuffle followed by a 70/5/25 train / validation / test split.
pub fn split_dataset<T: Clone>(samples: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if samples.is_empty() {
        return Err(Error::arg("cannot split an empty dataset"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = split_sizes(samples.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..a]), pick(&order[a..a + b]), pick(&order[a + b..])))
}

/// Four corner crops and one centre crop of image and mask together.
pub fn crop_augment(sample: &LabeledSample, crop_side: usize) -> Result<Vec<LabeledSample>> {
    let (h, w, _) = sample.image.dims3()?;
    if crop_side == 0 || crop_side > h || crop_side > w {
        return Err(Error::arg(format!(
            "crop side {crop_side} does not fit a {h}×{w} image"
        )));
    }
    let (bottom, right) = (h - crop_side, w - crop_side);
    let anchors = [
        (0, 0),
        (0, right),
        (bottom, 0),
        (bottom, right),
        (bottom / 2, right / 2),
    ];
    anchors
        .iter()
        .map(|&(top, left)| {
            Ok(LabeledSample {
                image: crop(&sample.image, top, left, crop_side, crop_side)?,
                mask: crop(&sample.mask, top, left, crop_side, crop_side)?,
                source_id: sample.source_id.clone(),
                split: sample.split,
            })
        })
        .collect()
}

/// Normalized inverse class frequencies over a set of binary masks.
pub fn class_weights<'a>(masks: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut counts = [0u64; 2];
    for m in masks {
        expect_binary(m)?;
        for &v in m.data() {
            counts[(v == 1.0) as usize] += 1;
        }
    }
    for (class, name) in ["non-manipulated", "manipulated"].iter().enumerate() {
        if counts[class] == 0 {
            return Err(Error::arg(format!(
                "class {class} ({name}) has no pixels in the training masks"
            )));
        }
    }
    let total = (counts[0] + counts[1]) as f64;
    let inv = counts.map(|c| total / c as f64);
    let s = inv[0] + inv[1];
    Ok(Tensor::vector(vec![inv[0] / s, inv[1] / s]))
}

fn check_loss_inputs(probs: &Tensor, mask: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    let (h, w, c) = probs.dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("probabilities need 2 channels, got {c}")));
    }
    mask.expect_shape(&[h, w])?;
    weights.expect_shape(&[2])?;
    expect_binary(mask)?;
    Ok((h, w))
}

/// `−(1/M) Σ_m w[y_m] · log p[m, y_m]`.
pub fn weighted_cross_entropy(probs: &Tensor, mask: &Tensor, weights: &Tensor) -> Result<f64> {
    let (h, w) = check_loss_inputs(probs, mask, weights)?;
    let p = probs.data();
    let wt = weights.data();
    let mut total = Neumaier::default();
    for (m, &y) in mask.data().iter().enumerate() {
        let y = y as usize;
        total.add(-wt[y] * p[2 * m + y].max(LOG_CLAMP).ln());
    }
    Ok(total.total() / (h * w) as f64)
}

/// Gradient of [`weighted_cross_entropy`] with respect to the softmax
/// logits, each pixel contributing `w_y (p − onehot(y)) / M`.
pub fn weighted_cross_entropy_grad(probs: &Tensor, mask: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (h, w) = check_loss_inputs(probs, mask, weights)?;
    let m_inv = 1.0 / (h * w) as f64;
    let p = probs.data();
    let wt = weights.data();
    let mut g = Tensor::zeros(&[h, w, 2]);
    for (m, (&y, out)) in mask.data().iter().zip(g.data_mut().chunks_exact_mut(2)).enumerate() {
        let y = y as usize;
        if p[2 * m + y] < LOG_CLAMP {
            continue;
        }
        let k = wt[y] * m_inv;
        out[0] = k * (p[2 * m] - (y == 0) as u8 as f64);
        out[1] = k * (p[2 * m + 1] - (y == 1) as u8 as f64);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Computed from the training masks when absent.
    pub class_weights: Option<[f64; 2]>,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            iterations: 1000,
            class_weights: None,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        TrainConfig {
            batch_size: match profile {
                Profile::Full => 4,
                Profile::Desk => 2,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(format!("train config: {m}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("batch size and checkpoint interval must be positive");
        }
        if let Some(w) = self.class_weights {
            if !w.iter().all(|&x| x > 0.0 && x < 1.0) || ((w[0] + w[1]) - 1.0).abs() > 1e-9 {
                return bad("class weights must lie in (0, 1) and sum to 1");
            }
        }
        Ok(())
    }
}

/// Adam moments mirroring the parameter structure.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: ModelParams,
    pub second: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter changes.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let mut grad_list = Vec::new();
    grads.for_each(|name, g| grad_list.push((name.to_string(), g.clone())));
    if let Some((name, _)) = grad_list.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let targets = params.named_tensors_mut();
    let firsts = state.first.named_tensors_mut();
    let seconds = state.second.named_tensors_mut();
    if targets.len() != grad_list.len()
        || firsts.len() != grad_list.len()
        || targets
            .iter()
            .zip(&grad_list)
            .any(|((_, p), (_, g))| p.shape() != g.shape())
    {
        return Err(Error::shape("gradient structure does not mirror the parameters"));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((((_, p), (_, m)), (_, v)), (_, g)) in targets
        .into_iter()
        .zip(firsts)
        .zip(seconds)
        .zip(&grad_list)
    {
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= config.learning_rate * (*m / c1) / ((*v / c2).sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// A sample with its network input precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: ModelInput,
    pub mask: Tensor,
}

impl PreparedSample {
    pub fn new(model: &Model, sample: &LabeledSample) -> Result<Self> {
        let s = sample.resized(model.config.input_side)?;
        Ok(PreparedSample {
            input: model.prepare(s.image)?,
            mask: s.mask,
        })
    }

    pub fn prepare_all(model: &Model, samples: &[LabeledSample]) -> Result<Vec<Self>> {
        samples.par_iter().map(|s| Self::new(model, s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<IterationRecord>,
    pub best_validation_loss: Option<f64>,
    /// Iteration whose loss was not finite; the model was rolled back.
    pub diverged_at: Option<usize>,
    pub stopped_early: bool,
}

pub fn write_loss_csv(mut w: impl Write, history: &[IterationRecord]) -> Result<()> {
    writeln!(w, "iteration,train_loss,validation_loss")?;
    for r in history {
        match r.validation_loss {
            Some(v) => writeln!(w, "{},{:e},{:e}", r.iteration, r.train_loss, v)?,
            None => writeln!(w, "{},{:e},", r.iteration, r.train_loss)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean loss of a set in infer mode.
pub fn evaluate_loss(model: &Model, samples: &[PreparedSample], weights: &Tensor) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let probs = model.predict_prepared(&s.input, Mode::Infer)?;
            weighted_cross_entropy(&probs, &s.mask, weights)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Batch loss and parameter gradients in train mode.
pub fn batch_gradients(
    model: &Model,
    batch: &[&PreparedSample],
    weights: &Tensor,
) -> Result<(f64, ModelParams, crate::network::ForwardPass)> {
    let inputs: Vec<ModelInput> = batch.iter().map(|s| s.input.clone()).collect();
    let pass = model.forward(&inputs, Mode::Train)?;
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut d_logits = Vec::with_capacity(batch.len());
    for (p, s) in pass.probs.iter().zip(batch) {
        loss += weighted_cross_entropy(p, &s.mask, weights)? / b;
        let mut g = weighted_cross_entropy_grad(p, &s.mask, weights)?;
        g.scale(1.0 / b);
        d_logits.push(g);
    }
    let grads = model.backward(&pass, &d_logits)?;
    Ok((loss, grads, pass))
}

/// Where checkpoints go during training.
#[derive(Debug, Clone)]
pub struct CheckpointPaths {
    pub latest: PathBuf,
    pub best: PathBuf,
}

impl CheckpointPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        CheckpointPaths {
            latest: dir.join("latest.floc"),
            best: dir.join("best.floc"),
        }
    }
}

/// Mini-batch Adam training. Each epoch visits the training set once in a
/// seeded order. Every `checkpoint_every` iterations the model is
/// validated (when a validation set is given) and checkpointed; the
/// checkpoint with the lowest validation loss is kept separately. A
/// non-finite loss restores the last checkpointed parameters and stops.
pub fn train(
    model: &mut Model,
    train_set: &[PreparedSample],
    validation_set: &[PreparedSample],
    config: &TrainConfig,
    checkpoints: Option<&CheckpointPaths>,
    mut observer: impl FnMut(&IterationRecord, &Model) -> Control,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let weights = match config.class_weights {
        Some(w) => Tensor::vector(w.to_vec()),
        None => class_weights(train_set.iter().map(|s| &s.mask))?,
    };
    let mut opt = OptimizerState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut last_good = model.clone();
    let mut report = TrainReport {
        history: Vec::with_capacity(config.iterations),
        best_validation_loss: None,
        diverged_at: None,
        stopped_early: false,
    };

    for iteration in 1..=config.iterations {
        if cursor >= order.len() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&PreparedSample> = order[cursor..end].iter().map(|&i| &train_set[i]).collect();
        cursor = end;

        let (loss, grads, pass) = batch_gradients(model, &batch, &weights)?;
        if !loss.is_finite() || !grads.is_finite() {
            log::warn!("loss diverged at iteration {iteration}; restoring last checkpoint");
            *model = last_good;
            report.diverged_at = Some(iteration);
            return Ok(report);
        }
        model.absorb_stats(&pass);
        adam_step(&mut model.params, &grads, &mut opt, config)?;

        let mut record = IterationRecord {
            iteration,
            train_loss: loss,
            validation_loss: None,
        };
        if iteration % config.checkpoint_every == 0 || iteration == config.iterations {
            if !validation_set.is_empty() {
                let v = evaluate_loss(model, validation_set, &weights)?;
                record.validation_loss = Some(v);
                if v.is_finite() && report.best_validation_loss.map_or(true, |b| v < b) {
                    report.best_validation_loss = Some(v);
                    if let Some(c) = checkpoints {
                        model.save(&c.best)?;
                    }
                }
            }
            if let Some(c) = checkpoints {
                model.save(&c.latest)?;
            }
            last_good = model.clone();
            log::info!("iteration {iteration}: loss {loss:.6}");
        }
        report.history.push(record);
        if observer(&record, model) == Control::Stop {
            report.stopped_early = true;
            if let Some(c) = checkpoints {
                model.save(&c.latest)?;
            }
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_largest_remainder() {
        assert_eq!(split_sizes(100), [70, 5, 25]);
        assert_eq!(split_sizes(20), [14, 1, 5]);
        assert_eq!(split_sizes(1), [1, 0, 0]);
        for n in 1..300 {
            assert_eq!(split_sizes(n).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn uniform_prediction_loss() {
        let probs = Tensor::filled(&[3, 3, 2], 0.5);
        let mask = Tensor::from_fn(&[3, 3], |i| (i % 2) as f64);
        let w = Tensor::vector(vec![0.5, 0.5]);
        let l = weighted_cross_entropy(&probs, &mask, &w).unwrap();
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn class_weight_closed_form() {
        let mask = Tensor::from_fn(&[10, 10], |i| (i < 10) as u8 as f64);
        let w = class_weights([&mask]).unwrap();
        assert!((w.data()[0] - 0.1).abs() < 1e-12);
        assert!((w.data()[1] - 0.9).abs() < 1e-12);
        let err = class_weights([&Tensor::zeros(&[2, 2])]).unwrap_err();
        assert!(err.to_string().contains("manipulated"));
    }
}
