//! Pixel accuracy, ROC / AUC and box-level average precision.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::expect_binary;
use crate::tensor::Tensor;

pub const MIN_BOX_AREA: usize = 64;
pub const IOU_THRESHOLD: f64 = 0.5;

/// Per-pixel class decision of a `[H, W, 2]` probability map; ties go to
/// non-manipulated.
pub fn argmax_mask(probs: &Tensor) -> Result<Tensor> {
    let (h, w, c) = probs.dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("probability map needs 2 channels, got {c}")));
    }
    Ok(Tensor::from_fn(&[h, w], |i| {
        let p = &probs.data()[2 * i..2 * i + 2];
        (p[1] > p[0]) as u8 as f64
    }))
}

/// The manipulated-class channel of a `[H, W, 2]` probability map.
pub fn manipulation_scores(probs: &Tensor) -> Result<Tensor> {
    let (h, w, c) = probs.dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("probability map needs 2 channels, got {c}")));
    }
    Ok(Tensor::from_fn(&[h, w], |i| probs.data()[2 * i + 1]))
}

pub fn pixel_accuracy(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    expect_binary(pred)?;
    expect_binary(truth)?;
    if pred.is_empty() {
        return Err(Error::arg("empty masks"));
    }
    let hits = pred
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Distinct scores, descending; point `i + 1` classifies `score ≥
    /// thresholds[i]` as manipulated. Point 0 is `(0, 0)`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "threshold,fpr,tpr")?;
        writeln!(w, "inf,{:e},{:e}", self.fpr[0], self.tpr[0])?;
        for (i, t) in self.thresholds.iter().enumerate() {
            writeln!(w, "{t:e},{:e},{:e}", self.fpr[i + 1], self.tpr[i + 1])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// ROC curve over every distinct score, with the trapezoidal area.
pub fn roc_auc(scores: &Tensor, truth: &Tensor) -> Result<RocCurve> {
    scores.expect_same_shape(truth)?;
    expect_binary(truth)?;
    let labels: Vec<bool> = truth.data().iter().map(|&v| v == 1.0).collect();
    roc_from_slices(scores.data(), &labels)
}

pub fn roc_from_slices(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::arg("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::arg("ROC needs both classes in the ground truth"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut thresholds = Vec::new();
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(s);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
    }
    let auc = fpr
        .windows(2)
        .zip(tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
        .sum();
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auc,
    })
}

/// Inclusive pixel rectangle with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize, score: f64) -> Result<Self> {
        if bottom < top || right < left {
            return Err(Error::arg(format!(
                "degenerate box ({top}, {left})–({bottom}, {right})"
            )));
        }
        Ok(BoundingBox {
            top,
            left,
            bottom,
            right,
            score,
        })
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let top = self.top.max(other.top);
        let left = self.left.max(other.left);
        let bottom = self.bottom.min(other.bottom);
        let right = self.right.min(other.right);
        if bottom < top || right < left {
            return 0.0;
        }
        let inter = ((bottom - top + 1) * (right - left + 1)) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }
}

/// Tight boxes around the 8-connected components of a binary mask,
/// dropping boxes with area below `min_area`. Each box scores the mean of
/// `scores` over its component. Sorted by `(top, left)`.
pub fn extract_boxes(mask: &Tensor, scores: &Tensor, min_area: usize) -> Result<Vec<BoundingBox>> {
    let (h, w) = mask.dims2()?;
    scores.expect_shape(&[h, w])?;
    expect_binary(mask)?;
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] != 1.0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut top, mut left, mut bottom, mut right) = (h, w, 0, 0);
        let (mut sum, mut n) = (0.0, 0usize);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            top = top.min(y);
            bottom = bottom.max(y);
            left = left.min(x);
            right = right.max(x);
            sum += scores.data()[p];
            n += 1;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if !seen[q] && mask.data()[q] == 1.0 {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        let b = BoundingBox::new(top, left, bottom, right, sum / n as f64)?;
        if b.area() >= min_area {
            boxes.push(b);
        }
    }
    boxes.sort_by(|a, b| (a.top, a.left).cmp(&(b.top, b.left)));
    Ok(boxes)
}

/// Greedy score-ordered matching at `iou_threshold`, then the area under
/// the all-points interpolated precision / recall curve.
pub fn average_precision(
    predictions: &[BoundingBox],
    truth: &[BoundingBox],
    iou_threshold: f64,
) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::arg("average precision needs at least one ground-truth box"));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::arg(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .partial_cmp(&predictions[a].score)
            .unwrap_or(Ordering::Equal)
    });
    let mut matched = vec![false; truth.len()];
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, _)| !matched[*j])
            .map(|(j, g)| (j, predictions[i].iou(g)))
            .filter(|&(_, iou)| iou >= iou_threshold)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            matched[j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / truth.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// Metrics of one evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub accuracy: f64,
    /// Absent when the ground truth has a single class.
    pub auc: Option<f64>,
}

pub fn image_metrics(name: impl Into<String>, probs: &Tensor, truth: &Tensor) -> Result<ImageMetrics> {
    let pred = argmax_mask(probs)?;
    let accuracy = pixel_accuracy(&pred, truth)?;
    let auc = match roc_auc(&manipulation_scores(probs)?, truth) {
        Ok(c) => Some(c.auc),
        Err(Error::Argument(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ImageMetrics {
        image: name.into(),
        accuracy,
        auc,
    })
}

/// Per-image means; AUC averages only images where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub images: usize,
    pub mean_accuracy: f64,
    pub mean_auc: Option<f64>,
}

pub fn summarize(rows: &[ImageMetrics]) -> Result<CorpusSummary> {
    if rows.is_empty() {
        return Err(Error::arg("no images to summarize"));
    }
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
    Ok(CorpusSummary {
        images: rows.len(),
        mean_accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64,
        mean_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    })
}

pub fn write_metrics_csv(mut w: impl Write, rows: &[ImageMetrics]) -> Result<()> {
    writeln!(w, "image,accuracy,auc")?;
    for r in rows {
        match r.auc {
            Some(a) => writeln!(w, "{},{:.12},{:.12}", r.image, r.accuracy, a)?,
            None => writeln!(w, "{},{:.12},", r.image, r.accuracy)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(mut w: impl Write, summary: &CorpusSummary, ap: Option<f64>) -> Result<()> {
    writeln!(w, "images,mean_accuracy,mean_auc,average_precision")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.12}")).unwrap_or_default();
    writeln!(
        w,
        "{},{:.12},{},{}",
        summary.images,
        summary.mean_accuracy,
        opt(summary.mean_auc),
        opt(ap)
    )?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_edge_cases() {
        let labels = [false, false, true, true];
        assert_eq!(roc_from_slices(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap().auc, 1.0);
        assert_eq!(roc_from_slices(&[0.5; 4], &labels).unwrap().auc, 0.5);
        assert!(roc_from_slices(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn small_blobs_are_dropped() {
        let mut mask = Tensor::zeros(&[20, 20]);
        for y in 0..5 {
            for x in 0..5 {
                mask.data_mut()[y * 20 + x] = 1.0;
            }
        }
        let scores = Tensor::filled(&[20, 20], 0.7);
        assert!(extract_boxes(&mask, &scores, MIN_BOX_AREA).unwrap().is_empty());
        assert_eq!(extract_boxes(&mask, &scores, 25).unwrap().len(), 1);
    }

    #[test]
    fn ties_favour_non_manipulated() {
        let probs = Tensor::filled(&[2, 2, 2], 0.5);
        assert_eq!(argmax_mask(&probs).unwrap().sum(), 0.0);
    }
}
