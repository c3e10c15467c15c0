//! Evaluation: IoU, the ten-threshold competition metric with its empty-mask
//! rules, the binarization threshold search, and horizontal-flip test-time
//! augmentation.
//!
//! Comparisons are strict on both sides: a pixel counts as foreground when
//! prob > t, and an IoU threshold counts as passed when iou > t. Threshold
//! ties resolve to the lowest candidate.

use crate::dataio::Mask;
use crate::segnet::SegModel;
use crate::tensorgraph::{sigmoid_scalar, Node};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty evaluation input")]
    EmptyInput,
    #[error("{probs} probability maps but {gts} ground-truth masks")]
    LengthMismatch { probs: usize, gts: usize },
}

/// Per-pixel foreground probabilities for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl ProbMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> ProbMap {
        assert_eq!(values.len(), h * w, "prob map size mismatch");
        ProbMap { h, w, values }
    }

    /// Binarizes with the strict rule prob > t.
    pub fn binarize(&self, t: f64) -> Mask {
        Mask::new(
            self.h,
            self.w,
            self.values.iter().map(|&p| u8::from(p > t)).collect(),
        )
    }

    pub fn hflip(&self) -> ProbMap {
        let mut values = vec![0.0; self.values.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                values[y * self.w + x] = self.values[y * self.w + (self.w - 1 - x)];
            }
        }
        ProbMap::new(self.h, self.w, values)
    }
}

/// One image's scores at the chosen threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageScore {
    pub id: String,
    pub iou: f64,
    pub tgs_precision: f64,
}

/// Final evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub tgs_map: f64,
    pub best_threshold: f64,
    pub per_image: Vec<PerImageScore>,
    pub n_empty_correct: usize,
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> f64 {
    assert_eq!(
        (pred.h, pred.w),
        (gt.h, gt.w),
        "iou: mask shapes ({},{}) vs ({},{})",
        pred.h,
        pred.w,
        gt.h,
        gt.w
    );
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        inter += usize::from(p == 1 && g == 1);
        union += usize::from(p == 1 || g == 1);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// The ten IoU thresholds 0.50, 0.55, …, 0.95.
pub fn tgs_thresholds() -> impl Iterator<Item = f64> {
    (50..100).step_by(5).map(|i| i as f64 / 100.0)
}

/// Per-image competition precision: the empty-mask rules, else the fraction
/// of the ten thresholds with iou strictly above them.
pub fn tgs_precision(pred: &Mask, gt: &Mask) -> f64 {
    if gt.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    if pred.is_empty() {
        return 0.0;
    }
    let score = iou(pred, gt);
    tgs_thresholds().filter(|t| score > *t).count() as f64 / 10.0
}

/// Mean competition precision of a prediction set at one binarization cut.
pub fn mean_tgs_at(probs: &[ProbMap], gts: &[Mask], t: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(gts)
        .map(|(p, g)| tgs_precision(&p.binarize(t), g))
        .sum();
    total / probs.len() as f64
}

/// The 41 candidate binarization cuts 0.30, 0.31, …, 0.70.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (30..=70).map(|i| i as f64 / 100.0)
}

/// Scans the threshold grid and returns (best threshold, score), taking the
/// lowest threshold on ties.
pub fn threshold_search(probs: &[ProbMap], gts: &[Mask]) -> Result<(f64, f64), MetricsError> {
    if probs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if probs.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            probs: probs.len(),
            gts: gts.len(),
        });
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    for t in threshold_grid() {
        let score = mean_tgs_at(probs, gts, t);
        if score > best.1 {
            best = (t, score);
        }
    }
    Ok(best)
}

/// Full report: threshold search, then per-image scores at the winner.
pub fn full_evaluation(
    ids: &[String],
    probs: &[ProbMap],
    gts: &[Mask],
) -> Result<EvalResult, MetricsError> {
    let (best_threshold, tgs_map) = threshold_search(probs, gts)?;
    let mut per_image = Vec::with_capacity(ids.len());
    let mut n_empty_correct = 0;
    for ((id, p), g) in ids.iter().zip(probs).zip(gts) {
        let pred = p.binarize(best_threshold);
        if g.is_empty() && pred.is_empty() {
            n_empty_correct += 1;
        }
        per_image.push(PerImageScore {
            id: id.clone(),
            iou: iou(&pred, g),
            tgs_precision: tgs_precision(&pred, g),
        });
    }
    Ok(EvalResult {
        tgs_map,
        best_threshold,
        per_image,
        n_empty_correct,
    })
}

fn hflip_batch(batch: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch.len()];
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = batch[base + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

fn forward_probs(model: &SegModel, batch: &[f64], b: usize) -> Vec<ProbMap> {
    let c = model.config.input_channels;
    let r = model.config.resolution;
    let node = Node::constant(vec![b, c, r, r], batch.to_vec());
    let logits = model.forward(&node).values();
    (0..b)
        .map(|i| {
            ProbMap::new(
                r,
                r,
                logits[i * r * r..(i + 1) * r * r]
                    .iter()
                    .map(|&z| sigmoid_scalar(z))
                    .collect(),
            )
        })
        .collect()
}

/// Averaged straight and horizontally flipped predictions:
/// 0.5·(σ(f(x)) + hflip(σ(f(hflip(x))))).
pub fn tta_hflip(model: &SegModel, batch: &[f64], b: usize) -> Vec<ProbMap> {
    let c = model.config.input_channels;
    let r = model.config.resolution;
    assert_eq!(batch.len(), b * c * r * r, "tta_hflip: batch size mismatch");
    let straight = forward_probs(model, batch, b);
    let flipped_in = hflip_batch(batch, b, c, r, r);
    let flipped = forward_probs(model, &flipped_in, b);
    straight
        .into_iter()
        .zip(flipped)
        .map(|(s, f)| {
            let fb = f.hflip();
            ProbMap::new(
                r,
                r,
                s.values
                    .iter()
                    .zip(&fb.values)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect(),
            )
        })
        .collect()
}
