//! Student/teacher adaptation: EMA teacher, confidence-masked pseudo-labels
//! and the training loop.

pub mod confidence;
pub mod pseudo;
pub mod trainer;

use serde::{Deserialize, Serialize};

pub use confidence::{nearest_rank_percentile, update_confidence_threshold, ConfidenceState};
pub use pseudo::{
    classification_loss, make_pseudo_labels_cls, make_pseudo_labels_pose, mask_pseudo_labels_cls, one_hot, pose_loss, LossVars,
    PseudoLabelBatch, PseudoLabelMode,
};
pub use trainer::{
    evaluate, history_csv, run_training, run_training_with, BetaSource, EvalModel, HistoryRow, TeacherBn, Phase, StepMetrics, Task, TeacherStats,
    TrainConfig, TrainData, TrainOutcome, Trainer, HISTORY_HEADER,
};

use crate::error::{Error, Result};
use crate::models::Network;

/// A student and its structurally identical EMA teacher. The optimizer only
/// ever sees the student.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub student: Network,
    pub teacher: Network,
    pub ema_decay: f64,
}

impl ModelPair {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: Network, ema_decay: f64) -> Result<Self> {
        check_decay(ema_decay)?;
        let mut teacher = student.clone();
        teacher.clear_grads();
        Ok(ModelPair {
            student,
            teacher,
            ema_decay,
        })
    }

    /// Re-copies the student into the teacher.
    pub fn sync_teacher(&mut self) {
        self.teacher = self.student.clone();
        self.teacher.clear_grads();
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.ema_decay)
    }
}

fn check_decay(d: f64) -> Result<()> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::config("ema_decay", format!("must lie in (0, 1), got {d}")));
    }
    Ok(())
}

/// `teacher <- d * teacher + (1 - d) * student` over parameters and BN
/// buffers, written as `t + (1 - d) * (s - t)` so that equal weights are an
/// exact fixed point.
pub fn ema_update(teacher: &mut Network, student: &Network, decay: f64) -> Result<()> {
    check_decay(decay)?;
    if teacher.params().len() != student.params().len() || teacher.running_stats().len() != student.running_stats().len()
    {
        return Err(Error::invalid("ema_update", "teacher and student have different parameter lists"));
    }
    for (t, s) in teacher.params().iter().zip(student.params()) {
        if t.shape() != s.shape() {
            return Err(Error::shape("ema_update", t.shape(), s.shape()));
        }
    }
    let step = 1.0 - decay;
    let blend = |t: &mut [f64], s: &[f64]| {
        for (a, &b) in t.iter_mut().zip(s) {
            *a += step * (b - *a);
        }
    };
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        blend(t.data_mut(), s.data());
    }
    for (t, s) in teacher.running_stats_mut().iter_mut().zip(student.running_stats()) {
        blend(&mut t.mean, &s.mean);
        blend(&mut t.var, &s.var);
    }
    Ok(())
}

/// The compared training arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Supervised source training for the whole schedule.
    SourceOnly,
    /// Mean teacher with alpha fixed at 0.
    MeanTeacherNoStyle,
    Imsty,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SourceOnly, Method::MeanTeacherNoStyle, Method::Imsty];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::MeanTeacherNoStyle => "mean_teacher_no_style",
            Method::Imsty => "imsty",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Specializes a base configuration to this arm.
    pub fn configure(self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        match self {
            Method::SourceOnly => cfg.pretrain_epochs = cfg.total_epochs,
            Method::MeanTeacherNoStyle => cfg.alpha_policy = crate::stylization::AlphaPolicy::Fixed { value: 0.0 },
            Method::Imsty => {}
        }
        cfg
    }
}

/// Independent sub-seed for stream `tag` of a run seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::zoo;

    #[test]
    fn ema_arithmetic() {
        let g = zoo::lenet5_classifier(1, 2).unwrap();
        let mut s = Network::new(g, 1).unwrap();
        for p in s.params_mut() {
            p.data_mut().fill(0.0);
        }
        let mut t = s.clone();
        for p in t.params_mut() {
            p.data_mut().fill(1.0);
        }
        ema_update(&mut t, &s, 0.999).unwrap();
        assert!(t.params().iter().all(|p| p.data().iter().all(|&v| (v - 0.999).abs() < 1e-15)));
        assert!(ema_update(&mut t, &s, 1.0).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()), Some(m));
        }
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
    }
}
