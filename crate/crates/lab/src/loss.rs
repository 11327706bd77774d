//! Differentiable counterparts of the core SSL and set-prediction losses.
//!
//! With a batch of one image these agree with `ssldetr_core::ssl::ssl_loss`
//! and `ssldetr_core::matching::detection_loss`. Over a batch, the SSL loss
//! is the mean of per-image losses, while the detection loss pools every
//! query of the batch into one weighted cross-entropy and divides the box
//! terms by the total number of objects.

use candle_core::{DType, Tensor};
use ssldetr_core::matching::{
    hungarian_match, pairwise_cost, DetectionSet, GroundTruthSet, LossWeights, MatchResult,
};
use ssldetr_core::ssl::{SslSample, SslTarget};
use ssldetr_core::{BBox, PatchGrid};

use crate::error::{LabError, Result};
use crate::model::params::log_softmax;
use crate::model::DetectionOutput;

/// Mean SSL loss of a batch of predictions against their samples.
///
/// `pred` is `(B, 3, H, W)` for continuous tasks and `(B, N, K)` logits for
/// discrete ones.
pub fn ssl_loss(pred: &Tensor, samples: &[SslSample], grid: &PatchGrid) -> Result<Tensor> {
    let b = samples.len();
    if b == 0 || pred.dim(0)? != b {
        return Err(LabError::Model(format!(
            "{} predictions for {b} samples",
            pred.dim(0)?
        )));
    }
    let dev = pred.device();
    match &samples[0].target {
        SslTarget::Pixels(first) => {
            let (c, h, w) = first.shape();
            if pred.dims() != [b, c, h, w] {
                return Err(LabError::Model(format!(
                    "pixel prediction {:?} does not match targets {:?}",
                    pred.dims(),
                    [b, c, h, w]
                )));
            }
            let plane = c * h * w;
            let patch_len = c * grid.patch_size() * grid.patch_size();
            let mut target = Vec::with_capacity(b * plane);
            let mut weight = vec![0f64; b * plane];
            for (i, s) in samples.iter().enumerate() {
                let SslTarget::Pixels(img) = &s.target else {
                    return Err(LabError::Model("mixed SSL targets in one batch".into()));
                };
                target.extend(img.data().iter().map(|&v| v as f64));
                if s.loss_indices.is_empty() {
                    continue;
                }
                let wv = 1.0 / (s.loss_indices.len() * patch_len * b) as f64;
                let f = grid.patch_size();
                for &p in &s.loss_indices {
                    let (r, col) = grid.position(p);
                    for ch in 0..c {
                        for y in r * f..(r + 1) * f {
                            let row = i * plane + ch * h * w + y * w;
                            weight[row + col * f..row + (col + 1) * f].fill(wv);
                        }
                    }
                }
            }
            let target = Tensor::from_vec(target, pred.dims(), dev)?.to_dtype(pred.dtype())?;
            let weight = Tensor::from_vec(weight, pred.dims(), dev)?.to_dtype(pred.dtype())?;
            Ok((pred - target)?.abs()?.mul(&weight)?.sum_all()?)
        }
        SslTarget::Labels { num_classes, .. } => {
            let (pb, n, k) = pred.dims3()?;
            if pb != b || n != grid.num_patches() || k != *num_classes {
                return Err(LabError::Model(format!(
                    "logits {:?} but expected [{b}, {}, {num_classes}]",
                    pred.dims(),
                    grid.num_patches()
                )));
            }
            let mut weight = vec![0f64; b * n * k];
            for (i, s) in samples.iter().enumerate() {
                let SslTarget::Labels { labels, .. } = &s.target else {
                    return Err(LabError::Model("mixed SSL targets in one batch".into()));
                };
                if labels.len() != s.loss_indices.len() {
                    return Err(LabError::Model("one label per loss patch is required".into()));
                }
                if s.loss_indices.is_empty() {
                    continue;
                }
                let wv = 1.0 / (s.loss_indices.len() * b) as f64;
                for (&p, &label) in s.loss_indices.iter().zip(labels) {
                    weight[(i * n + p) * k + label] = wv;
                }
            }
            let weight = Tensor::from_vec(weight, (b, n, k), dev)?.to_dtype(pred.dtype())?;
            Ok(log_softmax(pred)?.mul(&weight)?.sum_all()?.neg()?)
        }
    }
}

/// Converts one image's detached predictions to the core representation.
pub fn detection_set(out: &DetectionOutput, index: usize) -> Result<DetectionSet> {
    let logits: Vec<Vec<f64>> = out.logits.get(index)?.to_dtype(DType::F64)?.to_vec2()?;
    let boxes: Vec<Vec<f64>> = out.boxes.get(index)?.to_dtype(DType::F64)?.to_vec2()?;
    let k = logits.first().map_or(1, Vec::len);
    Ok(DetectionSet::new(
        k - 1,
        logits.concat(),
        boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect(),
    )?)
}

/// Optimal assignment per image, computed on detached values.
pub fn match_batch(
    out: &DetectionOutput,
    targets: &[GroundTruthSet],
    weights: LossWeights,
) -> Result<Vec<MatchResult>> {
    targets
        .iter()
        .enumerate()
        .map(|(i, gt)| {
            let set = detection_set(out, i)?;
            let cost = pairwise_cost(&set, gt, weights.cost_weights())?;
            Ok(hungarian_match(&cost)?)
        })
        .collect()
}

pub struct DetectionLoss {
    pub total: Tensor,
    pub classification: Tensor,
    pub bbox_l1: Tensor,
    pub giou: Tensor,
}

/// Generalized IoU of corresponding rows of two `(M, 4)` `cxcywh` tensors.
pub fn giou(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let corners = |t: &Tensor| -> Result<[Tensor; 4]> {
        let (cx, cy) = (t.narrow(1, 0, 1)?, t.narrow(1, 1, 1)?);
        let (hw, hh) = ((t.narrow(1, 2, 1)? * 0.5)?, (t.narrow(1, 3, 1)? * 0.5)?);
        Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
    };
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_a = ((&ax1 - &ax0)? * (&ay1 - &ay0)?)?;
    let area_b = ((&bx1 - &bx0)? * (&by1 - &by0)?)?;
    let union = ((area_a + area_b)? - &inter)?;
    let cw = (ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?;
    let ch = (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?;
    let enclosure = (cw * ch)?;
    let iou = inter.div(&union)?;
    let penalty = (&enclosure - &union)?.div(&enclosure)?;
    Ok((iou - penalty)?.squeeze(1)?)
}

/// Set-prediction loss of a batch under fixed `matches`.
pub fn detection_loss(
    out: &DetectionOutput,
    targets: &[GroundTruthSet],
    matches: &[MatchResult],
    weights: LossWeights,
) -> Result<DetectionLoss> {
    let (b, q, k) = out.logits.dims3()?;
    if targets.len() != b || matches.len() != b {
        return Err(LabError::Model(format!(
            "{b} predictions, {} targets, {} matchings",
            targets.len(),
            matches.len()
        )));
    }
    let dev = out.logits.device();
    let dtype = out.logits.dtype();
    let no_object = k - 1;

    let mut class_w = vec![0f64; b * q * k];
    for i in 0..b {
        for p in 0..q {
            class_w[(i * q + p) * k + no_object] = weights.no_object;
        }
    }
    let mut pred_rows = Vec::new();
    let mut target_boxes = Vec::new();
    for (i, (gt, m)) in targets.iter().zip(matches).enumerate() {
        if m.pairs.len() != gt.len() {
            return Err(LabError::Model(format!(
                "image {i}: {} pairs for {} objects",
                m.pairs.len(),
                gt.len()
            )));
        }
        for &(p, g) in &m.pairs {
            let label = gt.labels[g];
            if p >= q || label >= no_object {
                return Err(LabError::Model(format!("image {i}: pair ({p}, {g}) out of range")));
            }
            class_w[(i * q + p) * k + no_object] = 0.0;
            class_w[(i * q + p) * k + label] = 1.0;
            pred_rows.push((i * q + p) as u32);
            target_boxes.extend(gt.boxes[g].to_array());
        }
    }
    let w_sum: f64 = class_w.iter().sum();
    if w_sum > 0.0 {
        class_w.iter_mut().for_each(|w| *w /= w_sum);
    }
    let class_w = Tensor::from_vec(class_w, (b, q, k), dev)?.to_dtype(dtype)?;
    let classification = log_softmax(&out.logits)?.mul(&class_w)?.sum_all()?.neg()?;

    let num_boxes = targets.iter().map(GroundTruthSet::len).sum::<usize>().max(1) as f64;
    let (bbox_l1, giou_term) = if pred_rows.is_empty() {
        let zero = Tensor::zeros((), dtype, dev)?;
        (zero.clone(), zero)
    } else {
        let m = pred_rows.len();
        let idx = Tensor::from_vec(pred_rows, m, dev)?;
        let pred = out.boxes.reshape((b * q, 4))?.index_select(&idx, 0)?;
        let target = Tensor::from_vec(target_boxes, (m, 4), dev)?.to_dtype(dtype)?;
        let l1 = ((&pred - &target)?.abs()?.sum_all()? / num_boxes)?;
        let g = (giou(&pred, &target)?.affine(-1.0, 1.0)?.sum_all()? / num_boxes)?;
        (l1, g)
    };
    let total = ((classification.affine(weights.class, 0.0)? + bbox_l1.affine(weights.l1, 0.0)?)?
        + giou_term.affine(weights.giou, 0.0)?)?;
    Ok(DetectionLoss {
        total,
        classification,
        bbox_l1,
        giou: giou_term,
    })
}

/// Reads a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Softmax probabilities `(B, Q, C + 1)` read back as nested vectors.
pub fn class_probabilities(logits: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(crate::model::params::softmax(logits)?
        .to_dtype(DType::F64)?
        .to_vec3()?)
}

/// Highest-scoring real class and its probability for each query.
pub fn best_class(probs: &[f64]) -> (usize, f64) {
    probs[..probs.len() - 1]
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
}
