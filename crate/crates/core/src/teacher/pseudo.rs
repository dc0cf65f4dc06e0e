//! Pseudo-labels from the teacher and the per-task loss assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::heatmap::{decode_with_peaks, render_gaussian, HEATMAP_SIGMA};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    /// One-hot argmax.
    #[default]
    Hard,
    /// The teacher's sigmoid probabilities.
    Soft,
}

/// Teacher targets with keep flags: one flag per sample for classification,
/// one per joint for pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Tensor,
    /// `true` keeps the entry in the unsupervised loss.
    pub mask: Vec<bool>,
    pub confidences: Vec<f64>,
}

impl PseudoLabelBatch {
    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&k| k).count()
    }

    /// Keep flags broadcast to every element of `labels`.
    fn element_mask(&self) -> Vec<bool> {
        let per = self.labels.numel() / self.mask.len().max(1);
        self.mask.iter().flat_map(|&k| std::iter::repeat_n(k, per)).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Labels from teacher logits (N x C): argmax over sigmoid probabilities
/// with ties to the lowest index, confidence = max probability. Every entry
/// starts kept.
pub fn make_pseudo_labels_cls(teacher_logits: &Tensor, mode: PseudoLabelMode) -> Result<PseudoLabelBatch> {
    let (n, c) = teacher_logits.dims2()?;
    let probs: Vec<f64> = teacher_logits.data().iter().map(|&x| sigmoid(x)).collect();
    let mut labels = vec![0.0; n * c];
    let mut confidences = Vec::with_capacity(n);
    for (i, row) in probs.chunks(c).enumerate() {
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        confidences.push(row[best]);
        match mode {
            PseudoLabelMode::Hard => labels[i * c + best] = 1.0,
            PseudoLabelMode::Soft => labels[i * c..][..c].copy_from_slice(row),
        }
    }
    Ok(PseudoLabelBatch {
        labels: Tensor::new(vec![n, c], labels)?,
        mask: vec![true; n],
        confidences,
    })
}

/// Masks every sample whose confidence is strictly below `beta`.
pub fn mask_pseudo_labels_cls(batch: &mut PseudoLabelBatch, beta: f64) {
    for (m, &c) in batch.mask.iter_mut().zip(&batch.confidences) {
        *m = c >= beta;
    }
}

/// Teacher heatmaps re-rendered as Gaussians at their argmax; confidence is
/// the peak value. Within the batch the `ceil((1 - keep_ratio) * N*J)`
/// lowest peaks are masked, together with any joint tied with the highest
/// of them.
pub fn make_pseudo_labels_pose(teacher_heatmaps: &Tensor, keep_ratio: f64) -> Result<PseudoLabelBatch> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::config("keep_ratio", format!("must lie in (0, 1], got {keep_ratio}")));
    }
    let (n, j, h, w) = teacher_heatmaps.dims4()?;
    let peaks = decode_with_peaks(teacher_heatmaps)?;
    let plane = h * w;
    let mut labels = vec![0.0; n * j * plane];
    for (k, (at, _)) in peaks.iter().enumerate() {
        render_gaussian(&mut labels[k * plane..][..plane], h, w, [at[0] as f64, at[1] as f64], HEATMAP_SIGMA);
    }
    let confidences: Vec<f64> = peaks.iter().map(|&(_, v)| v).collect();
    let drop = ((1.0 - keep_ratio) * confidences.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mask = if drop == 0 {
        vec![true; confidences.len()]
    } else {
        let mut sorted = confidences.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        let cut = sorted[drop.min(sorted.len()) - 1];
        confidences.iter().map(|&c| c > cut).collect()
    };
    Ok(PseudoLabelBatch {
        labels: Tensor::new(vec![n, j, h, w], labels)?,
        mask,
        confidences,
    })
}

/// Loss nodes on the tape; `total = sup + lambda * unsup`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub sup: Var,
    pub unsup: Var,
    pub total: Var,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda_unsup", format!("must be >= 0, got {lambda}")));
    }
    Ok(())
}

fn assemble(tape: &mut Tape, sup: Var, unsup: Var, lambda: f64) -> Result<LossVars> {
    let weighted = tape.scale(unsup, lambda);
    let total = tape.add(sup, weighted)?;
    Ok(LossVars { sup, unsup, total })
}

/// `BCE(y_s, src) + lambda * BCE(pseudo, tgt)` with the unsupervised mean
/// taken over kept samples only (0 when none are kept).
pub fn classification_loss(
    tape: &mut Tape,
    student_src_logits: Var,
    y_s: &Tensor,
    student_tgt_logits: Var,
    pseudo: &PseudoLabelBatch,
    lambda: f64,
) -> Result<LossVars> {
    check_lambda(lambda)?;
    let sup = tape.bce_with_logits_loss(student_src_logits, y_s)?;
    let unsup = tape.masked_bce_with_logits_loss(student_tgt_logits, &pseudo.labels, &pseudo.element_mask())?;
    assemble(tape, sup, unsup, lambda)
}

/// `MSE(y_s, src) + lambda * MSE(pseudo, tgt)` with masked joints excluded
/// from the unsupervised mean.
pub fn pose_loss(
    tape: &mut Tape,
    student_src_heatmaps: Var,
    y_s_heatmaps: &Tensor,
    student_tgt_heatmaps: Var,
    pseudo: &PseudoLabelBatch,
    lambda: f64,
) -> Result<LossVars> {
    let keep = vec![true; y_s_heatmaps.numel()];
    pose_loss_with_source_mask(tape, student_src_heatmaps, y_s_heatmaps, &keep, student_tgt_heatmaps, pseudo, lambda)
}

/// [`pose_loss`] that also drops source elements with `keep_s == false`,
/// used for joints pushed out of the image by augmentation.
pub(crate) fn pose_loss_with_source_mask(
    tape: &mut Tape,
    student_src_heatmaps: Var,
    y_s_heatmaps: &Tensor,
    keep_s: &[bool],
    student_tgt_heatmaps: Var,
    pseudo: &PseudoLabelBatch,
    lambda: f64,
) -> Result<LossVars> {
    check_lambda(lambda)?;
    let sup = tape.masked_mse_loss(student_src_heatmaps, y_s_heatmaps, keep_s)?;
    let unsup = tape.masked_mse_loss(student_tgt_heatmaps, &pseudo.labels, &pseudo.element_mask())?;
    assemble(tape, sup, unsup, lambda)
}

/// One-hot rows for class indices.
pub fn one_hot(classes: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * num_classes];
    for (i, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::invalid("one_hot", format!("class {c} with {num_classes} classes")));
        }
        data[i * num_classes + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), num_classes], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn cls_labels_and_ties() {
        let t = Tensor::new(vec![2, 3], vec![logit(0.1), logit(0.9), logit(0.3), 0.0, 0.0, -1.0]).unwrap();
        let b = make_pseudo_labels_cls(&t, PseudoLabelMode::Hard).unwrap();
        assert_eq!(b.labels.data(), [0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((b.confidences[0] - 0.9).abs() < 1e-12);
        assert_eq!(b.confidences[1], 0.5);
        assert_eq!(b.mask, [true, true]);
    }

    #[test]
    fn strict_mask() {
        let mut b = PseudoLabelBatch {
            labels: Tensor::zeros(vec![3, 2]),
            mask: vec![true; 3],
            confidences: vec![0.3, 0.6, 0.9],
        };
        mask_pseudo_labels_cls(&mut b, 0.6);
        assert_eq!(b.mask, [false, true, true]);
        mask_pseudo_labels_cls(&mut b, 0.0);
        assert_eq!(b.kept(), 3);
    }

    #[test]
    fn pose_batch_mask() {
        let mut hm = Tensor::zeros(vec![2, 2, 4, 4]);
        for (k, v) in [0.1, 0.5, 0.9, 0.7].into_iter().enumerate() {
            hm.data_mut()[k * 16 + 5] = v;
        }
        let b = make_pseudo_labels_pose(&hm, 0.5).unwrap();
        assert_eq!(b.mask, [false, false, true, true]);
        assert_eq!(b.labels.data()[5], 1.0);
        assert_eq!(make_pseudo_labels_pose(&hm, 1.0).unwrap().kept(), 4);
        let zero = make_pseudo_labels_pose(&Tensor::zeros(vec![1, 3, 4, 4]), 0.9).unwrap();
        assert_eq!(zero.kept(), 0);
        assert_eq!(zero.labels.data()[0], 1.0);
    }
}
