//! Evaluation metrics: overall accuracy and PCK.

use crate::error::{Error, Result};

/// Fraction of exact matches, with no per-class reweighting.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("accuracy", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::invalid("accuracy", "no samples"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_pck(pred: &[[f64; 2]], truth: &[[f64; 2]], valid: &[bool], threshold_frac: f64) -> Result<()> {
    if pred.len() != truth.len() || valid.len() != truth.len() {
        return Err(Error::invalid(
            "pck",
            format!("{} predictions, {} targets, {} flags", pred.len(), truth.len(), valid.len()),
        ));
    }
    if threshold_frac.is_nan() || threshold_frac <= 0.0 {
        return Err(Error::invalid("pck", format!("threshold fraction {threshold_frac} must be positive")));
    }
    Ok(())
}

fn within(p: [f64; 2], t: [f64; 2], limit: f64) -> bool {
    (p[0] - t[0]).hypot(p[1] - t[1]) <= limit
}

/// Fraction of valid joints whose prediction lies within
/// `threshold_frac * image_size` pixels (inclusive). Coordinates are in
/// image pixels; decode heatmaps with `decode_to_image` first.
pub fn pck(pred: &[[f64; 2]], truth: &[[f64; 2]], valid: &[bool], image_size: usize, threshold_frac: f64) -> Result<f64> {
    check_pck(pred, truth, valid, threshold_frac)?;
    let limit = threshold_frac * image_size as f64;
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((&p, &t), &ok) in pred.iter().zip(truth).zip(valid) {
        if ok {
            total += 1;
            hits += usize::from(within(p, t, limit));
        }
    }
    if total == 0 {
        return Err(Error::invalid("pck", "no valid joints"));
    }
    Ok(hits as f64 / total as f64)
}

/// PCK per joint index (`None` where a joint is never valid), with
/// coordinates laid out `[sample][joint]`.
pub fn pck_per_joint(
    pred: &[[f64; 2]],
    truth: &[[f64; 2]],
    valid: &[bool],
    joints: usize,
    image_size: usize,
    threshold_frac: f64,
) -> Result<Vec<Option<f64>>> {
    check_pck(pred, truth, valid, threshold_frac)?;
    if joints == 0 || !truth.len().is_multiple_of(joints) {
        return Err(Error::invalid("pck", format!("{} keypoints for {joints} joints", truth.len())));
    }
    let limit = threshold_frac * image_size as f64;
    let mut hits = vec![0usize; joints];
    let mut total = vec![0usize; joints];
    for (i, ((&p, &t), &ok)) in pred.iter().zip(truth).zip(valid).enumerate() {
        if ok {
            total[i % joints] += 1;
            hits[i % joints] += usize::from(within(p, t, limit));
        }
    }
    Ok(hits
        .iter()
        .zip(&total)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect())
}

/// One evaluated metric; `value` is always `correct / count`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub correct: usize,
    pub count: usize,
    pub epoch: Option<usize>,
}

pub const METRIC_HEADER: &str = "metric,value,correct,count,epoch";

impl MetricRecord {
    pub fn new(metric: impl Into<String>, correct: usize, count: usize, epoch: Option<usize>) -> Result<Self> {
        if count == 0 || correct > count {
            return Err(Error::invalid("metric_record", format!("{correct} correct of {count}")));
        }
        Ok(MetricRecord {
            metric: metric.into(),
            value: correct as f64 / count as f64,
            correct,
            count,
            epoch,
        })
    }

    pub fn csv_line(&self) -> String {
        let epoch = self.epoch.map(|e| e.to_string()).unwrap_or_default();
        format!("{},{},{},{},{epoch}", self.metric, self.value, self.correct, self.count)
    }
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
