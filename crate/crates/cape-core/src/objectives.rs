//! Training losses and the PCK evaluation metric.
//!
//! The heatmap loss is the mean squared error between the sigmoid of the
//! similarity logits and Gaussian ground-truth heatmaps, averaged over valid
//! keypoints and cells. The offset loss is the L1 distance between every
//! layer's coordinate estimate and the ground truth, averaged over layers
//! and valid keypoints. Total = lambda * heatmap + offset.

use crate::autodiff::{Tensor, Var};
use crate::error::{CoreError, Result};
use crate::params::Net;

/// Ground-truth heatmaps (K, h*w): H_i(cell) = exp(-d^2 / (2 sigma^2)) with
/// d the grid distance to the cell containing the keypoint; invalid
/// keypoints get all-zero maps. Keypoints are in normalized (0,1)^2.
pub fn gt_heatmaps(
    keypoints: &[(f64, f64)],
    valid: &[bool],
    h: usize,
    w: usize,
    sigma: f64,
) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(CoreError::contract("heatmap sigma must be positive"));
    }
    let mut values = vec![0.0; keypoints.len() * h * w];
    for (i, (&(x, y), &ok)) in keypoints.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        let cx = ((x * w as f64).floor() as isize).clamp(0, w as isize - 1);
        let cy = ((y * h as f64).floor() as isize).clamp(0, h as isize - 1);
        for row in 0..h {
            for col in 0..w {
                let d2 = (row as isize - cy).pow(2) + (col as isize - cx).pow(2);
                values[i * h * w + row * w + col] =
                    (-(d2 as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Tensor::new(vec![keypoints.len(), h * w], values)
}

fn valid_count(valid: &[bool]) -> Result<usize> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(CoreError::NoValidKeypoints);
    }
    Ok(n)
}

/// (1 / (K_valid * h * w)) * sum over valid keypoints and cells of
/// (sigmoid(M) - H)^2.
pub fn heatmap_loss(
    net: &mut Net<'_>,
    similarity: Var,
    gt: &Tensor,
    valid: &[bool],
) -> Result<Var> {
    let shape = net.tape.shape(similarity).to_vec();
    if gt.shape() != shape.as_slice() || valid.len() != shape[0] {
        return Err(CoreError::contract(format!(
            "similarity {:?}, ground truth {:?}, {} validity flags",
            shape,
            gt.shape(),
            valid.len()
        )));
    }
    let k_valid = valid_count(valid)?;
    let probs = net.tape.sigmoid(similarity)?;
    let diff = net.tape.add_const(probs, negated(gt))?;
    let masked = net.tape.mask_rows(diff, valid)?;
    let sq = net.tape.mul(masked, masked)?;
    let total = net.tape.sum_all(sq)?;
    net.tape.scale(total, 1.0 / (k_valid * shape[1]) as f64)
}

fn negated(t: &Tensor) -> Tensor {
    let mut n = t.clone();
    for v in n.values_mut() {
        *v = -*v;
    }
    n
}

/// (1 / (L * K_valid)) * sum over layers and valid keypoints of
/// |x - x_gt| + |y - y_gt|.
pub fn offset_loss(
    net: &mut Net<'_>,
    coord_history: &[Var],
    gt: &[(f64, f64)],
    valid: &[bool],
) -> Result<Var> {
    if coord_history.is_empty() {
        return Err(CoreError::contract("offset loss needs at least one layer"));
    }
    let k_valid = valid_count(valid)?;
    let gt_neg = Tensor::new(
        vec![gt.len(), 2],
        gt.iter().flat_map(|&(x, y)| [-x, -y]).collect(),
    )?;
    let mut total: Option<Var> = None;
    for &coords in coord_history {
        if net.tape.shape(coords) != [gt.len(), 2] {
            return Err(CoreError::contract(format!(
                "coordinate layer {:?} does not match {} ground-truth points",
                net.tape.shape(coords),
                gt.len()
            )));
        }
        let diff = net.tape.add_const(coords, gt_neg.clone())?;
        let masked = net.tape.mask_rows(diff, valid)?;
        let abs = net.tape.abs(masked)?;
        let s = net.tape.sum_all(abs)?;
        total = Some(match total {
            Some(acc) => net.tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one layer");
    net.tape
        .scale(total, 1.0 / (coord_history.len() * k_valid) as f64)
}

/// lambda * heatmap + offset.
pub fn total_loss(net: &mut Net<'_>, heatmap: Var, offset: Var, lambda: f64) -> Result<Var> {
    let scaled = net.tape.scale(heatmap, lambda)?;
    net.tape.add(scaled, offset)
}

/// Plain-value loss summary for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub heatmap: f64,
    pub offset: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Fraction of valid keypoints whose prediction lies within
/// `threshold * max(bbox_w, bbox_h)` pixels of the ground truth.
pub fn pck(
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    valid: &[bool],
    bbox: [f64; 4],
    threshold: f64,
) -> Result<f64> {
    let (correct, total) = pck_counts(pred, gt, valid, bbox, threshold)?;
    Ok(correct as f64 / total as f64)
}

/// (correct, valid) counts, the order-independent aggregation form.
pub fn pck_counts(
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    valid: &[bool],
    bbox: [f64; 4],
    threshold: f64,
) -> Result<(usize, usize)> {
    if threshold <= 0.0 {
        return Err(CoreError::contract("pck threshold must be positive"));
    }
    if bbox[2] <= 0.0 || bbox[3] <= 0.0 {
        return Err(CoreError::contract("bbox must have positive extents"));
    }
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(CoreError::contract(format!(
            "pck: {} predictions, {} ground truths, {} validity flags",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let total = valid_count(valid)?;
    let limit = threshold * bbox[2].max(bbox[3]);
    let correct = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|((p, g), v)| {
            **v && ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() <= limit
        })
        .count();
    Ok((correct, total))
}
