//! Training configuration, the per-step update and the epoch loop.

use serde::{Deserialize, Serialize};

use super::confidence::{update_confidence_threshold, ConfidenceState};
use super::pseudo::{
    classification_loss, make_pseudo_labels_cls, make_pseudo_labels_pose, mask_pseudo_labels_cls, one_hot,
    pose_loss_with_source_mask, LossVars, PseudoLabelMode,
};
use super::{derive_seed, ModelPair};
use crate::data::{augment, epoch_batches, AugmentSpec, DomainBatch};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax_rows, pck};
use crate::models::heatmap::{decode_to_image, render_heatmaps, HEATMAP_SIGMA};
use crate::models::{zoo, LayerGraph, Mode, Network};
use crate::stylization::{compute_channel_stats, AlphaPolicy, AlphaSampler, ImplicitStylization, StyleSource, DEFAULT_EPS};
use crate::tensor::{AdamConfig, AdamState, StatScope, Tape, Tensor, Var};

const TAG_INIT: u64 = 1;
const TAG_SRC_ORDER: u64 = 2;
const TAG_TGT_ORDER: u64 = 3;
const TAG_SRC_AUG: u64 = 4;
const TAG_TGT_AUG: u64 = 5;
const TAG_ALPHA: u64 = 6;
const EVAL_CHUNK: usize = 256;

/// Which predictions feed the confidence threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSource {
    /// Student source predictions and teacher target predictions.
    #[default]
    SourceAndTarget,
    TargetOnly,
}

/// Where the teacher's source statistics come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherStats {
    /// The student's source features of the same step.
    #[default]
    StudentSource,
    /// The teacher's own encoding of the source batch.
    TeacherSource,
}

/// Normalization statistics used by batch-norm layers of the teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherBn {
    /// Statistics of the batch being labeled, as the student sees it in training.
    #[default]
    Batch,
    /// The EMA running buffers.
    Running,
}

impl TeacherBn {
    fn mode(self) -> Mode {
        match self {
            TeacherBn::Batch => Mode::Batch,
            TeacherBn::Running => Mode::Eval,
        }
    }
}

/// Which network `TrainOutcome::final_model` and per-epoch evaluation use
/// once adaptation has started.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Teacher,
    /// The teacher lags the student by roughly `1 / (1 - ema_decay)` steps,
    /// which is most of a short run.
    #[default]
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_unsup: f64,
    pub alpha_policy: AlphaPolicy,
    /// Percentile in (0, 100] for the classification threshold.
    pub percentile_p: f64,
    pub ema_decay: f64,
    pub lr: f64,
    /// Epoch indices (0-based) at whose start the rate is multiplied.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub total_epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub stat_scope: StatScope,
    pub seed: u64,
    pub style_eps: f64,
    pub stop_gradient: bool,
    pub pseudo_labels: PseudoLabelMode,
    pub beta_source: BetaSource,
    pub teacher_stats: TeacherStats,
    pub teacher_bn: TeacherBn,
    /// Fraction of pose joints kept per batch.
    pub keep_ratio: f64,
    pub augment: AugmentSpec,
    pub eval_model: EvalModel,
    pub pck_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_unsup: 1.0,
            alpha_policy: AlphaPolicy::Uniform01 { seed: 0 },
            percentile_p: 50.0,
            ema_decay: 0.999,
            lr: 1e-4,
            lr_decay_epochs: vec![20, 26],
            lr_decay_factor: 0.1,
            total_epochs: 30,
            pretrain_epochs: 10,
            batch_size: 32,
            stat_scope: StatScope::Minibatch,
            seed: 42,
            style_eps: DEFAULT_EPS,
            stop_gradient: false,
            pseudo_labels: PseudoLabelMode::Hard,
            beta_source: BetaSource::SourceAndTarget,
            teacher_stats: TeacherStats::StudentSource,
            teacher_bn: TeacherBn::Batch,
            keep_ratio: 0.5,
            augment: AugmentSpec::identity(),
            eval_model: EvalModel::Student,
            pck_threshold: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 11] = [
            ("lambda_unsup", self.lambda_unsup >= 0.0 && self.lambda_unsup.is_finite(), "must be >= 0"),
            ("percentile_p", self.percentile_p > 0.0 && self.percentile_p <= 100.0, "must lie in (0, 100]"),
            ("ema_decay", self.ema_decay > 0.0 && self.ema_decay < 1.0, "must lie in (0, 1)"),
            ("lr", self.lr > 0.0 && self.lr.is_finite(), "must be positive"),
            ("lr_decay_factor", self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0, "must lie in (0, 1]"),
            ("total_epochs", self.total_epochs > 0, "must be positive"),
            ("pretrain_epochs", self.pretrain_epochs <= self.total_epochs, "must not exceed total_epochs"),
            ("batch_size", self.batch_size > 0, "must be positive"),
            ("style_eps", self.style_eps > 0.0, "must be positive"),
            ("keep_ratio", self.keep_ratio > 0.0 && self.keep_ratio <= 1.0, "must lie in (0, 1]"),
            ("pck_threshold", self.pck_threshold > 0.0, "must be positive"),
        ];
        for (field, ok, msg) in checks {
            if !ok {
                return Err(Error::config(field, msg));
            }
        }
        self.alpha_policy.validate()?;
        self.augment.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    fn alpha_sampler(&self) -> AlphaSampler {
        match self.alpha_policy {
            AlphaPolicy::Uniform01 { seed } => AlphaPolicy::Uniform01 {
                seed: derive_seed(self.seed, TAG_ALPHA) ^ seed,
            }
            .sampler(),
            fixed => fixed.sampler(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Pose { joints: usize, width: usize },
}

impl Task {
    /// The network for images of `channels` x `size` x `size`.
    pub fn graph(&self, channels: usize, size: usize) -> Result<LayerGraph> {
        match *self {
            Task::Classification { classes } => {
                if size != 32 {
                    return Err(Error::config("data.size", format!("classification expects 32x32 images, got {size}")));
                }
                zoo::lenet5_classifier(channels, classes)
            }
            Task::Pose { joints, width } => zoo::pose_model(channels, joints, width, size),
        }
    }

    /// Freshly initialized network. The final heatmap convolution starts at
    /// zero: He-scaled outputs are several times the unit Gaussian peaks and
    /// stall the regression.
    pub fn build_network(&self, channels: usize, size: usize, seed: u64) -> Result<Network> {
        let mut net = Network::new(self.graph(channels, size)?, seed)?;
        if let Task::Pose { .. } = self {
            net.zero_last_layer();
        }
        Ok(net)
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Task::Classification { .. } => "accuracy",
            Task::Pose { .. } => "pck",
        }
    }
}

/// Per-step loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_total: f64,
    pub beta: f64,
    pub alpha: f64,
    /// Fraction of pseudo-label entries that entered the loss.
    pub kept_fraction: f64,
}

/// Owns the model pair, optimizer and threshold state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub task: Task,
    pub pair: ModelPair,
    pub confidence: ConfidenceState,
    optimizer: AdamState,
    alpha: AlphaSampler,
    block: ImplicitStylization,
    image_size: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, task: Task, student: Network, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let optimizer = AdamState::new(
            student.params(),
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        let block = ImplicitStylization {
            scope: cfg.stat_scope,
            eps: cfg.style_eps,
            stop_gradient: cfg.stop_gradient,
        };
        Ok(Trainer {
            alpha: cfg.alpha_sampler(),
            pair: ModelPair::new(student, cfg.ema_decay)?,
            cfg,
            task,
            confidence: ConfidenceState::new(),
            optimizer,
            block,
            image_size,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.optimizer.set_lr(lr);
    }

    /// Starts the adaptation phase from the current student.
    pub fn begin_adaptation(&mut self) {
        self.pair.sync_teacher();
    }

    fn source_targets(&self, src: &DomainBatch, out_shape: &[usize]) -> Result<(Tensor, Vec<bool>)> {
        match self.task {
            Task::Classification { classes } => {
                let y = one_hot(src.classes()?, classes)?;
                let n = y.numel();
                Ok((y, vec![true; n]))
            }
            Task::Pose { joints, .. } => {
                let k = src.keypoints()?;
                if k.joints != joints {
                    return Err(Error::invalid("train_step", format!("{} joints for a {joints}-joint model", k.joints)));
                }
                let size = out_shape[2];
                let y = render_heatmaps(&k.coords, &k.valid, joints, self.image_size, size, HEATMAP_SIGMA)?;
                let keep = k.valid.iter().flat_map(|&v| std::iter::repeat_n(v, size * out_shape[3])).collect();
                Ok((y, keep))
            }
        }
    }

    fn finish_step(&mut self, tape: &Tape, loss: &LossVars, vars: &[Var]) -> Result<()> {
        let mut grads = tape.backward(loss.total)?;
        self.pair.student.load_grads(&mut grads, vars);
        self.optimizer.step(self.pair.student.params_mut())?;
        self.pair.student.clear_grads();
        Ok(())
    }

    /// Source-only supervised step; the teacher is untouched.
    pub fn supervised_step(&mut self, src: &DomainBatch) -> Result<StepMetrics> {
        let mut tape = Tape::new();
        let vars = self.pair.student.bind(&mut tape, true);
        let x = tape.constant(src.images.clone());
        let (y_hat, _) = self.pair.student.forward(&mut tape, &vars, x, Mode::Train)?;
        let (y, keep) = self.source_targets(src, tape.shape(y_hat))?;
        let sup = match self.task {
            Task::Classification { .. } => tape.bce_with_logits_loss(y_hat, &y)?,
            Task::Pose { .. } => tape.masked_mse_loss(y_hat, &y, &keep)?,
        };
        let loss = LossVars {
            sup,
            unsup: sup,
            total: sup,
        };
        let value = tape.value(sup).item()?;
        self.finish_step(&tape, &loss, &vars)?;
        Ok(StepMetrics {
            loss_sup: value,
            loss_unsup: 0.0,
            loss_total: value,
            beta: self.confidence.beta,
            alpha: 0.0,
            kept_fraction: 0.0,
        })
    }

    /// One adaptation step on a labeled source batch and an unlabeled target
    /// batch, followed by the EMA update of the teacher.
    pub fn train_step(&mut self, src: &DomainBatch, tgt: &DomainBatch) -> Result<StepMetrics> {
        if src.len() != tgt.len() {
            return Err(Error::invalid("train_step", format!("batch sizes {} and {} differ", src.len(), tgt.len())));
        }
        let alpha = self.alpha.sample_alpha();
        let mut tape = Tape::new();
        let vars = self.pair.student.bind(&mut tape, true);
        let xs = tape.constant(src.images.clone());
        let xt = tape.constant(tgt.images.clone());
        let student = &mut self.pair.student;
        let f_s = student.encode(&mut tape, &vars, xs, Mode::Train)?;
        let f_t = student.encode(&mut tape, &vars, xt, Mode::Train)?;
        let f_st = self.block.apply(&mut tape, f_s, StyleSource::Features(f_t), alpha)?;
        let y_s_hat = student.decode(&mut tape, &vars, f_st, Mode::Train)?;
        let y_t_hat = student.decode(&mut tape, &vars, f_t, Mode::Train)?;

        let teacher_out = self.teacher_predict(&tape, f_s, src, tgt, alpha)?;
        let (y_s, keep_s) = self.source_targets(src, tape.shape(y_s_hat))?;
        let (loss, pseudo) = match self.task {
            Task::Classification { .. } => {
                let mut pseudo = make_pseudo_labels_cls(&teacher_out, self.cfg.pseudo_labels)?;
                mask_pseudo_labels_cls(&mut pseudo, self.confidence.beta);
                if self.cfg.beta_source == BetaSource::SourceAndTarget {
                    let src_conf = make_pseudo_labels_cls(tape.value(y_s_hat), PseudoLabelMode::Hard)?.confidences;
                    self.confidence.collect(&src_conf);
                }
                self.confidence.collect(&pseudo.confidences);
                let loss = classification_loss(&mut tape, y_s_hat, &y_s, y_t_hat, &pseudo, self.cfg.lambda_unsup)?;
                (loss, pseudo)
            }
            Task::Pose { .. } => {
                let pseudo = make_pseudo_labels_pose(&teacher_out, self.cfg.keep_ratio)?;
                let loss = pose_loss_with_source_mask(&mut tape, y_s_hat, &y_s, &keep_s, y_t_hat, &pseudo, self.cfg.lambda_unsup)?;
                (loss, pseudo)
            }
        };
        let metrics = StepMetrics {
            loss_sup: tape.value(loss.sup).item()?,
            loss_unsup: tape.value(loss.unsup).item()?,
            loss_total: tape.value(loss.total).item()?,
            beta: self.confidence.beta,
            alpha,
            kept_fraction: pseudo.kept() as f64 / pseudo.mask.len().max(1) as f64,
        };
        self.finish_step(&tape, &loss, &vars)?;
        self.pair.ema_update()?;
        Ok(metrics)
    }

    /// Teacher output on the target batch stylized toward source statistics,
    /// computed on a separate constant tape.
    fn teacher_predict(
        &self,
        student_tape: &Tape,
        f_s: Var,
        src: &DomainBatch,
        tgt: &DomainBatch,
        alpha: f64,
    ) -> Result<Tensor> {
        let teacher = &self.pair.teacher;
        let tap = teacher.tap_index();
        let end = teacher.graph().layers.len();
        let bn = self.cfg.teacher_bn.mode();
        let mut tape = Tape::new();
        let vars = teacher.bind(&mut tape, false);
        let source_features = match self.cfg.teacher_stats {
            TeacherStats::StudentSource => student_tape.value(f_s).clone(),
            TeacherStats::TeacherSource => {
                let xs = tape.constant(src.images.clone());
                let f = teacher.forward_range_frozen(&mut tape, &vars, xs, 0..tap, bn)?;
                tape.value(f).clone()
            }
        };
        let stats = compute_channel_stats(&source_features, self.block.scope, self.block.eps)?;
        let xt = tape.constant(tgt.images.clone());
        let f_t = teacher.forward_range_frozen(&mut tape, &vars, xt, 0..tap, bn)?;
        let f_ts = self.block.apply(&mut tape, f_t, StyleSource::Stats(&stats), alpha)?;
        let out = teacher.forward_range_frozen(&mut tape, &vars, f_ts, tap + 1..end, bn)?;
        Ok(tape.value(out).clone())
    }
}

/// Labeled source, unlabeled target for training and an optional labeled
/// target set for per-epoch evaluation.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: DomainBatch,
    pub target: DomainBatch,
    pub target_eval: Option<DomainBatch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        }
    }
}

/// Epoch means of the step metrics; `epoch` is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_total: f64,
    /// Threshold after the epoch-end update.
    pub beta: f64,
    /// Target accuracy or PCK, NaN without an evaluation set.
    pub target_metric: f64,
    pub alpha_mean: f64,
}

pub const HISTORY_HEADER: &str = "epoch,phase,loss_sup,loss_unsup,loss_total,beta,target_metric,alpha_mean";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.phase.as_str(),
            r.loss_sup,
            r.loss_unsup,
            r.loss_total,
            r.beta,
            r.target_metric,
            r.alpha_mean
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: Network,
    /// Present once adaptation has run.
    pub teacher: Option<Network>,
    pub eval_model: EvalModel,
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    /// The network reported as the result of the run.
    pub fn final_model(&self) -> &Network {
        match (&self.teacher, self.eval_model) {
            (Some(t), EvalModel::Teacher) => t,
            _ => &self.student,
        }
    }
}

/// Target accuracy (classification) or PCK at `pck_threshold` (pose) of an
/// eval-mode model.
pub fn evaluate(model: &Network, task: &Task, data: &DomainBatch, pck_threshold: f64) -> Result<f64> {
    let (_, size, _) = data.image_dims();
    let mut outputs: Vec<f64> = Vec::new();
    let mut out_shape = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let len = EVAL_CHUNK.min(data.len() - start);
        let y = model.predict(&data.images.slice_outer(start, len)?)?;
        out_shape = y.shape().to_vec();
        outputs.extend_from_slice(y.data());
        start += len;
    }
    match *task {
        Task::Classification { classes } => {
            let pred = argmax_rows(&outputs, classes);
            accuracy(&pred, data.classes()?)
        }
        Task::Pose { .. } => {
            out_shape[0] = data.len();
            let hm = Tensor::new(out_shape, outputs)?;
            let k = data.keypoints()?;
            let pred = decode_to_image(&hm, size)?;
            pck(&pred, &k.coords, &k.valid, size, pck_threshold)
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Source-only pretraining for `pretrain_epochs`, then adaptation steps for
/// the rest of the schedule. Each adaptation step pairs the k-th source batch
/// with target batch `k mod (target batches)`.
pub fn run_training(cfg: &TrainConfig, data: &TrainData, task: &Task) -> Result<TrainOutcome> {
    run_training_with(cfg, data, task, |_| {})
}

/// [`run_training`] with a callback after every epoch.
pub fn run_training_with(
    cfg: &TrainConfig,
    data: &TrainData,
    task: &Task,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (c, h, w) = data.source.image_dims();
    if data.target.image_dims() != (c, h, w) || h != w {
        return Err(Error::invalid(
            "run_training",
            format!("source images {c}x{h}x{w} and target {:?} must match and be square", data.target.image_dims()),
        ));
    }
    if data.source.len() < cfg.batch_size || data.target.len() < cfg.batch_size {
        return Err(Error::config("batch_size", "larger than the source or target set"));
    }
    let student = task.build_network(c, h, derive_seed(cfg.seed, TAG_INIT))?;
    let mut trainer = Trainer::new(cfg.clone(), *task, student, h)?;
    let target = data.target.unlabeled();
    let mut history = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        let adapting = epoch >= cfg.pretrain_epochs;
        if epoch == cfg.pretrain_epochs {
            trainer.begin_adaptation();
        }
        trainer.set_lr(cfg.lr_at(epoch));
        let e = epoch as u64;
        let src_batches = epoch_batches(data.source.len(), cfg.batch_size, derive_seed(cfg.seed, TAG_SRC_ORDER), e);
        let tgt_batches = epoch_batches(target.len(), cfg.batch_size, derive_seed(cfg.seed, TAG_TGT_ORDER), e);
        let src_aug = derive_seed(derive_seed(cfg.seed, TAG_SRC_AUG), e);
        let tgt_aug = derive_seed(derive_seed(cfg.seed, TAG_TGT_AUG), e);
        let mut steps = Vec::with_capacity(src_batches.len());
        for (k, idx) in src_batches.iter().enumerate() {
            let src = augment(&data.source.select(idx)?, &cfg.augment, src_aug)?;
            let m = if adapting {
                let tgt = augment(&target.select(&tgt_batches[k % tgt_batches.len()])?, &cfg.augment, tgt_aug)?;
                trainer.train_step(&src, &tgt)?
            } else {
                trainer.supervised_step(&src)?
            };
            if !m.loss_total.is_finite() {
                return Err(Error::invalid("run_training", format!("non-finite loss at epoch {} step {k}", epoch + 1)));
            }
            steps.push(m);
        }
        let beta = if adapting && matches!(task, Task::Classification { .. }) {
            update_confidence_threshold(&mut trainer.confidence, cfg.percentile_p)?
        } else {
            trainer.confidence.beta
        };
        let model = if adapting && cfg.eval_model == EvalModel::Teacher {
            &trainer.pair.teacher
        } else {
            &trainer.pair.student
        };
        let target_metric = match &data.target_eval {
            Some(ev) => evaluate(model, task, ev, cfg.pck_threshold)?,
            None => f64::NAN,
        };
        let pick = |f: fn(&StepMetrics) -> f64| mean(&steps.iter().map(f).collect::<Vec<_>>());
        let row = HistoryRow {
            epoch: epoch + 1,
            phase: if adapting { Phase::Adapt } else { Phase::Pretrain },
            loss_sup: pick(|m| m.loss_sup),
            loss_unsup: pick(|m| m.loss_unsup),
            loss_total: pick(|m| m.loss_total),
            beta,
            target_metric,
            alpha_mean: pick(|m| m.alpha),
        };
        on_epoch(&row);
        history.push(row);
    }
    let adapted = cfg.pretrain_epochs < cfg.total_epochs;
    Ok(TrainOutcome {
        teacher: adapted.then(|| trainer.pair.teacher.clone()),
        student: trainer.pair.student,
        eval_model: cfg.eval_model,
        history,
    })
}
