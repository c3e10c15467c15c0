//! Segmentation losses: binary cross-entropy on logits, smoothed soft Dice,
//! and the Lovász hinge, plus the two-stage weighting used by every run.
//!
//! All three accept logits of shape `[B, …]` (canonically `[B, 1, H, W]`)
//! with a matching flat {0,1} target array, reduce per sample, and average
//! over the batch. They are custom graph operations with hand-written
//! backward rules; the Lovász backward treats the sort permutation as a
//! constant, which is the standard subgradient.

use crate::tensorgraph::{add, scalar_mul, sigmoid_scalar, Node};

/// Stage-1 mixture weights for (BCE, Dice, Lovász).
pub const STAGE1_WEIGHTS: (f64, f64, f64) = (0.5, 0.3, 0.2);

/// Dice smoothing constant; keeps empty masks well-conditioned.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LossError {
    #[error("stage must be 1 or 2, got {0}")]
    InvalidStage(u8),
}

/// Per-component values of one loss evaluation plus the differentiable
/// total. Stage 1: total = 0.5·bce + 0.3·dice + 0.2·lovasz. Stage 2: total
/// is the Lovász hinge alone (the other components are still reported).
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub lovasz: f64,
    pub total: f64,
    pub stage: u8,
    pub total_node: Node,
}

fn batch_layout(logits: &Node, targets: &[f64], op: &str) -> (usize, usize) {
    let shape = logits.shape();
    assert!(shape.len() >= 2, "{op}: logits must have a batch dimension, got {shape:?}");
    let b = shape[0];
    let total: usize = shape.iter().product();
    assert_eq!(
        total,
        targets.len(),
        "{op}: logits shape {shape:?} vs {} targets",
        targets.len()
    );
    (b, total / b)
}

/// Mean binary cross-entropy over all pixels, computed in the stable form
/// max(z,0) − z·t + ln(1 + exp(−|z|)).
pub fn bce_with_logits(logits: &Node, targets: &[f64]) -> Node {
    let (_, _) = batch_layout(logits, targets, "bce_with_logits");
    let zv = logits.values();
    let n = zv.len() as f64;
    let total: f64 = zv
        .iter()
        .zip(targets)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    let t_owned = targets.to_vec();
    let zin = logits.clone();
    Node::from_op(
        vec![1],
        vec![total / n],
        vec![logits.clone()],
        "bce_with_logits",
        Box::new(move |go| {
            let g = go[0] / n;
            let zv = zin.values();
            let dz: Vec<f64> = zv
                .iter()
                .zip(&t_owned)
                .map(|(&z, &t)| g * (sigmoid_scalar(z) - t))
                .collect();
            zin.accumulate_grad(&dz);
        }),
    )
}

/// Smoothed soft Dice on sigmoid probabilities, per sample then batch mean:
/// 1 − (2·Σpt + ε)/(Σp + Σt + ε) with ε = 1.
pub fn soft_dice(logits: &Node, targets: &[f64]) -> Node {
    let (b, per) = batch_layout(logits, targets, "soft_dice");
    let zv = logits.values();
    let probs: Vec<f64> = zv.iter().map(|&z| sigmoid_scalar(z)).collect();

    let mut total = 0.0;
    let mut sums = Vec::with_capacity(b);
    for s in 0..b {
        let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
        for i in s * per..(s + 1) * per {
            inter += probs[i] * targets[i];
            psum += probs[i];
            tsum += targets[i];
        }
        total += 1.0 - (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS);
        sums.push((inter, psum + tsum));
    }

    let t_owned = targets.to_vec();
    let zin = logits.clone();
    Node::from_op(
        vec![1],
        vec![total / b as f64],
        vec![logits.clone()],
        "soft_dice",
        Box::new(move |go| {
            let g = go[0] / b as f64;
            let zv = zin.values();
            let mut dz = vec![0.0; zv.len()];
            for s in 0..b {
                let (inter, union) = sums[s];
                let denom = union + DICE_EPS;
                for i in s * per..(s + 1) * per {
                    let p = sigmoid_scalar(zv[i]);
                    let d_ratio = (2.0 * t_owned[i] * denom - (2.0 * inter + DICE_EPS)) / (denom * denom);
                    dz[i] = g * (-d_ratio) * p * (1.0 - p);
                }
            }
            zin.accumulate_grad(&dz);
        }),
    )
}

/// Per-sample Lovász decomposition: hinge errors sorted descending (stable,
/// original index breaks ties), the Jaccard-extension step vector over the
/// sorted prefix chain, and Σ max(e,0)·g.
struct LovaszSample {
    loss: f64,
    /// (flat pixel index, d loss / d error) for pixels with positive hinge.
    active: Vec<(usize, f64)>,
}

fn lovasz_sample(z: &[f64], t: &[f64]) -> LovaszSample {
    let n = z.len();
    let signs: Vec<f64> = t.iter().map(|&ti| 2.0 * ti - 1.0).collect();
    let errors: Vec<f64> = z.iter().zip(&signs).map(|(zi, si)| 1.0 - zi * si).collect();

    // Stable descending sort under a total order, so non-finite logits
    // surface as a non-finite loss instead of a panic here.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));

    let gts: f64 = t.iter().sum();
    let (mut cum_t, mut cum_bg) = (0.0, 0.0);
    let mut prev_jaccard = 0.0;
    let mut loss = 0.0;
    let mut active = Vec::new();
    for &idx in &order {
        cum_t += t[idx];
        cum_bg += 1.0 - t[idx];
        let union = gts + cum_bg;
        let jaccard = 1.0 - (gts - cum_t) / union;
        let step = jaccard - prev_jaccard;
        prev_jaccard = jaccard;
        if errors[idx] > 0.0 {
            loss += errors[idx] * step;
            active.push((idx, step));
        }
    }
    LovaszSample { loss, active }
}

/// Lovász hinge surrogate for the Jaccard loss, per sample on the flattened
/// image, averaged over the batch.
pub fn lovasz_hinge(logits: &Node, targets: &[f64]) -> Node {
    let (b, per) = batch_layout(logits, targets, "lovasz_hinge");
    let zv = logits.values();

    let mut total = 0.0;
    let mut samples = Vec::with_capacity(b);
    for s in 0..b {
        let sample = lovasz_sample(&zv[s * per..(s + 1) * per], &targets[s * per..(s + 1) * per]);
        total += sample.loss;
        samples.push(sample);
    }

    let t_owned = targets.to_vec();
    let zin = logits.clone();
    Node::from_op(
        vec![1],
        vec![total / b as f64],
        vec![logits.clone()],
        "lovasz_hinge",
        Box::new(move |go| {
            let g = go[0] / b as f64;
            let mut dz = vec![0.0; t_owned.len()];
            for (s, sample) in samples.iter().enumerate() {
                for &(idx, step) in &sample.active {
                    let flat = s * per + idx;
                    let sign = 2.0 * t_owned[flat] - 1.0;
                    // d e/d z = −sign; the permutation and steps are frozen.
                    dz[flat] += g * step * (-sign);
                }
            }
            zin.accumulate_grad(&dz);
        }),
    )
}

/// Evaluates all three losses and combines them per the stage curriculum.
pub fn staged_loss(logits: &Node, targets: &[f64], stage: u8) -> Result<LossBreakdown, LossError> {
    if stage != 1 && stage != 2 {
        return Err(LossError::InvalidStage(stage));
    }
    let bce = bce_with_logits(logits, targets);
    let dice = soft_dice(logits, targets);
    let lovasz = lovasz_hinge(logits, targets);
    let (bce_v, dice_v, lovasz_v) = (bce.scalar(), dice.scalar(), lovasz.scalar());
    let total_node = if stage == 1 {
        let (wb, wd, wl) = STAGE1_WEIGHTS;
        add(
            &add(&scalar_mul(&bce, wb), &scalar_mul(&dice, wd)),
            &scalar_mul(&lovasz, wl),
        )
    } else {
        lovasz
    };
    Ok(LossBreakdown {
        bce: bce_v,
        dice: dice_v,
        lovasz: lovasz_v,
        total: total_node.scalar(),
        stage,
        total_node,
    })
}
