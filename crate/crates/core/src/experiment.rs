//! Reproducible runs: JSON experiment configs with dotted overrides, dataset
//! specs, and the train / eval / export / gen-data operations behind the
//! command-line tool.
//!
//! Every output file is written to a temporary name and renamed into place,
//! so an interrupted run never leaves a half-written artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{apply_domain_shift, export_dataset, gen_synth_digits, gen_synth_keypoints, read_idx, Domain, DomainBatch, Labels, ShiftSpec};
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, pck_per_joint, MetricRecord, METRIC_HEADER};
use crate::models::{decode_to_image, Layer, Network, Shape};
use crate::teacher::{history_csv, run_training_with, HistoryRow, Method, Task, TrainConfig, TrainData};
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where a dataset comes from. Target sets are shifted with `shift`; a set
/// without a shift is still tagged with the domain it is used as.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SynthDigits {
        count: usize,
        seed: u64,
        #[serde(default = "digit_size")]
        size: usize,
        #[serde(default)]
        shift: Option<ShiftSpec>,
    },
    SynthKeypoints {
        count: usize,
        seed: u64,
        #[serde(default = "pose_size")]
        size: usize,
        #[serde(default)]
        shift: Option<ShiftSpec>,
    },
    /// Rank-3 IDX images (zero-padded to 32 x 32 if smaller) with optional
    /// rank-1 labels.
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        shift: Option<ShiftSpec>,
    },
}

fn digit_size() -> usize {
    32
}

fn pose_size() -> usize {
    64
}

impl DatasetSpec {
    fn shift(&self) -> Option<&ShiftSpec> {
        match self {
            DatasetSpec::SynthDigits { shift, .. } | DatasetSpec::SynthKeypoints { shift, .. } | DatasetSpec::Idx { shift, .. } => {
                shift.as_ref()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.shift() {
            s.validate()?;
        }
        match *self {
            DatasetSpec::SynthDigits { count: 0, .. } | DatasetSpec::SynthKeypoints { count: 0, .. } => {
                Err(Error::config("count", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Materializes the set for `task`, tagged as `domain`.
    pub fn build(&self, task: &Task, domain: Domain) -> Result<DomainBatch> {
        self.validate()?;
        let mut data = match (self, task) {
            (DatasetSpec::SynthDigits { count, seed, size, .. }, Task::Classification { classes }) => {
                gen_synth_digits(*count, *classes, *size, *seed)?
            }
            (DatasetSpec::SynthKeypoints { count, seed, size, .. }, Task::Pose { joints, .. }) => {
                gen_synth_keypoints(*count, *joints, *size, *seed)?
            }
            (DatasetSpec::Idx { images, labels, limit, .. }, Task::Classification { classes }) => {
                load_idx_digits(images, labels.as_deref(), *limit, *classes)?
            }
            _ => return Err(Error::config("data.generator", format!("does not provide data for a {} task", task.metric_name()))),
        };
        if let Some(s) = self.shift() {
            data = apply_domain_shift(&data, s)?;
        }
        data.domain = domain;
        Ok(data)
    }
}

fn load_idx_digits(images: &Path, labels: Option<&Path>, limit: Option<usize>, classes: usize) -> Result<DomainBatch> {
    let img = read_idx(images)?;
    let [n, h, w] = img.shape()[..] else {
        return Err(Error::config("data.images", format!("expected a rank-3 IDX file, got shape {:?}", img.shape())));
    };
    if h > 32 || w > 32 {
        return Err(Error::config("data.images", format!("images are {h}x{w}; at most 32x32 is supported")));
    }
    let n = limit.map_or(n, |l| l.min(n));
    let (top, left) = ((32 - h) / 2, (32 - w) / 2);
    let mut pixels = vec![0.0; n * 32 * 32];
    for i in 0..n {
        for r in 0..h {
            let src = &img.data()[(i * h + r) * w..][..w];
            pixels[(i * 32 + top + r) * 32 + left..][..w].copy_from_slice(src);
        }
    }
    let labels = match labels {
        None => Labels::None,
        Some(path) => {
            let t = read_idx(path)?;
            if t.rank() != 1 || t.numel() < n {
                return Err(Error::config("data.labels", format!("need a rank-1 file with at least {n} labels")));
            }
            let cl: Vec<usize> = t.data()[..n].iter().map(|&v| v as usize).collect();
            if let Some(bad) = cl.iter().find(|&&c| c >= classes) {
                return Err(Error::config("data.labels", format!("label {bad} with {classes} classes")));
            }
            Labels::Classes(cl)
        }
    };
    Ok(DomainBatch {
        images: Tensor::new(vec![n, 1, 32, 32], pixels)?,
        domain: Domain::Source,
        labels,
        ids: (0..n as u64).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DatasetSpec,
    pub target: DatasetSpec,
    /// Labeled target data for evaluation; none skips per-epoch metrics.
    #[serde(default)]
    pub eval: Option<DatasetSpec>,
}

impl DataConfig {
    /// The synthetic pair used for `task` when a config names no data.
    pub fn default_for(task: &Task) -> Self {
        match task {
            Task::Classification { .. } => {
                let shift = ShiftSpec {
                    invert: true,
                    noise_sigma: 0.2,
                    texture_amplitude: 0.3,
                    seed: 7,
                    ..Default::default()
                };
                let digits = |count, seed, shift| DatasetSpec::SynthDigits { count, seed, size: 32, shift };
                DataConfig {
                    source: digits(2000, 1, None),
                    target: digits(2000, 2, Some(shift)),
                    eval: Some(digits(500, 3, Some(shift))),
                }
            }
            Task::Pose { .. } => {
                let shift = ShiftSpec {
                    noise_sigma: 0.1,
                    seed: 7,
                    ..Default::default()
                };
                let figures = |count, seed, shift| DatasetSpec::SynthKeypoints { count, seed, size: 64, shift };
                DataConfig {
                    source: figures(1500, 1, None),
                    target: figures(1500, 2, Some(shift)),
                    eval: Some(figures(300, 3, Some(shift))),
                }
            }
        }
    }

    pub fn build(&self, task: &Task) -> Result<TrainData> {
        Ok(TrainData {
            source: self.source.build(task, Domain::Source)?,
            target: self.target.build(task, Domain::Target)?,
            target_eval: self.eval.as_ref().map(|e| e.build(task, Domain::Target)).transpose()?,
        })
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_method")]
    pub method: Method,
    /// Defaults to the synthetic pair for the task.
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_task() -> Task {
    Task::Classification { classes: 10 }
}

fn default_method() -> Method {
    Method::Imsty
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: default_task(),
            method: default_method(),
            data: None,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn data(&self) -> DataConfig {
        self.data.clone().unwrap_or_else(|| DataConfig::default_for(&self.task))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let data = self.data();
        for spec in [Some(&data.source), Some(&data.target), data.eval.as_ref()].into_iter().flatten() {
            spec.validate()?;
        }
        Ok(())
    }

    /// Parses a config, or the `config` of a run manifest, then applies
    /// `key.path=value` overrides. Values parse as JSON where possible and
    /// as strings otherwise.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text)?;
        if v.get("artifact_version").is_some() {
            v = v.get("config").cloned().ok_or_else(|| Error::config("config", "manifest has no `config`"))?;
        }
        let implicit_data = v.get("data").is_none_or(Value::is_null);
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        // `data.*` overrides on a config without data edit the task default.
        let data_overrides: Vec<&String> = overrides.iter().filter(|o| o.starts_with("data.")).collect();
        if implicit_data && !data_overrides.is_empty() {
            let task = match v.get("task") {
                Some(t) => serde_json::from_value(t.clone())?,
                None => default_task(),
            };
            v["data"] = serde_json::to_value(DataConfig::default_for(&task))?;
            for o in data_overrides {
                apply_override(&mut v, o)?;
            }
        }
        let cfg: ExperimentConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    /// The config with `method` applied to the training schedule.
    pub fn resolved_train(&self) -> TrainConfig {
        self.method.configure(&self.train)
    }
}

/// Sets `key.path=value` inside a JSON object, creating objects on the way.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like `key.path=value`"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::config(key, format!("`{}` is not an object", parts[..i].join("."))));
            }
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields a segment")
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Record of one training run; its `config` alone reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Final target metric by name, if an eval set was configured.
    pub final_metrics: BTreeMap<String, f64>,
    pub model_checksum: String,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";

fn save_network(net: &Network, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    save_checkpoint(&tmp, &net.named_tensors())?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: &Path) -> Result<Network> {
    Network::from_named(&load_checkpoint(path)?)
}

/// Trains per `cfg` and writes the history, checkpoints and manifest into
/// `out_dir`. `on_epoch` sees every history row as it is produced.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path, on_epoch: impl FnMut(&HistoryRow)) -> Result<RunManifest> {
    cfg.validate()?;
    let started = unix_now();
    let data = cfg.data().build(&cfg.task)?;
    let train_cfg = cfg.resolved_train();
    let outcome = run_training_with(&train_cfg, &data, &cfg.task, on_epoch)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join(HISTORY_FILE), history_csv(&outcome.history).as_bytes())?;
    let model = outcome.final_model();
    save_network(model, &out_dir.join(MODEL_FILE))?;
    save_network(&outcome.student, &out_dir.join(STUDENT_FILE))?;
    let mut files = vec![HISTORY_FILE.to_string(), MODEL_FILE.to_string(), STUDENT_FILE.to_string()];
    if let Some(t) = &outcome.teacher {
        save_network(t, &out_dir.join(TEACHER_FILE))?;
        files.push(TEACHER_FILE.to_string());
    }
    let mut final_metrics = BTreeMap::new();
    if let Some(last) = outcome.history.last().filter(|r| r.target_metric.is_finite()) {
        final_metrics.insert(cfg.task.metric_name().to_string(), last.target_metric);
    }
    files.push(MANIFEST_FILE.to_string());
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        config: ExperimentConfig {
            data: Some(cfg.data()),
            ..cfg.clone()
        },
        seed: cfg.train.seed,
        out_dir: out_dir.to_path_buf(),
        started_unix: started,
        finished_unix: unix_now(),
        final_metrics,
        model_checksum: model.param_checksum(),
        files,
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Per-joint and overall PCK, or accuracy, of a checkpoint on one set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `joint0`, `joint1`, ... then `All` for pose; `accuracy` alone for
    /// classification. Joints that are never valid are omitted.
    pub records: Vec<MetricRecord>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let width = self.records.iter().map(|r| r.metric.len()).max().unwrap_or(0);
        self.records
            .iter()
            .map(|r| format!("{:<width$}  {:.4}  ({}/{})\n", r.metric, r.value, r.correct, r.count))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRIC_HEADER}\n");
        for r in &self.records {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }
}

/// The task a checkpoint was trained for, read off its output shape.
pub fn infer_task(net: &Network) -> Result<Task> {
    match net.graph().output_shape()? {
        Shape::Flat(classes) => Ok(Task::Classification { classes }),
        Shape::Spatial { c, .. } => match net.graph().layers.first().map(|l| l.layer) {
            Some(Layer::Conv2d { out_c, .. }) => Ok(Task::Pose { joints: c, width: out_c }),
            _ => Err(Error::config("checkpoint", "spatial output without a leading convolution")),
        },
    }
}

pub fn evaluate_checkpoint(net: &Network, data: &DomainBatch, pck_threshold: f64) -> Result<EvalReport> {
    let task = infer_task(net)?;
    let (c, size, w) = data.image_dims();
    if net.graph().input.dims() != [c, size, w] {
        return Err(Error::shape("eval", &net.graph().input.dims(), &[c, size, w]));
    }
    let mut outputs = Vec::new();
    let mut shape = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let len = 256.min(data.len() - start);
        let y = net.predict(&data.images.slice_outer(start, len)?)?;
        shape = y.shape().to_vec();
        outputs.extend_from_slice(y.data());
        start += len;
    }
    shape[0] = data.len();
    let records = match task {
        Task::Classification { classes } => {
            let truth = data.classes()?;
            let pred = argmax_rows(&outputs, classes);
            let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
            vec![MetricRecord::new("accuracy", correct, truth.len(), None)?]
        }
        Task::Pose { joints, .. } => {
            let k = data.keypoints()?;
            let pred = decode_to_image(&Tensor::new(shape, outputs)?, size)?;
            let limit = pck_threshold * size as f64;
            let hit = |i: usize| {
                let (p, t) = (pred[i], k.coords[i]);
                (p[0] - t[0]).hypot(p[1] - t[1]) <= limit
            };
            let mut records = Vec::with_capacity(joints + 1);
            let per = pck_per_joint(&pred, &k.coords, &k.valid, joints, size, pck_threshold)?;
            for (j, v) in per.iter().enumerate() {
                if v.is_some() {
                    let idx: Vec<usize> = (j..pred.len()).step_by(joints).filter(|&i| k.valid[i]).collect();
                    let correct = idx.iter().filter(|&&i| hit(i)).count();
                    records.push(MetricRecord::new(format!("joint{j}"), correct, idx.len(), None)?);
                }
            }
            let valid: Vec<usize> = (0..pred.len()).filter(|&i| k.valid[i]).collect();
            let correct = valid.iter().filter(|&&i| hit(i)).count();
            records.push(MetricRecord::new("All", correct, valid.len(), None)?);
            records
        }
    };
    Ok(EvalReport { records })
}

/// Materializes the source, target and eval sets of `cfg` under `out_dir`
/// plus a JSON manifest; returns the manifest.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<GenDataManifest> {
    cfg.validate()?;
    let data = cfg.data();
    let mut sets = Vec::new();
    for (name, spec, domain) in [("source", Some(&data.source), Domain::Source), ("target", Some(&data.target), Domain::Target), ("eval", data.eval.as_ref(), Domain::Target)] {
        let Some(spec) = spec else { continue };
        let batch = spec.build(&cfg.task, domain)?;
        let dir = out_dir.join(name);
        let count = export_dataset(&batch, &dir)?;
        sets.push(GeneratedSet {
            name: name.to_string(),
            domain,
            count,
            dir: PathBuf::from(name),
        });
    }
    let manifest = GenDataManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        task: cfg.task,
        data,
        sets,
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSet {
    pub name: String,
    pub domain: Domain,
    /// Sample files written.
    pub count: usize,
    /// Relative to the output directory.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataManifest {
    pub artifact_version: String,
    pub task: Task,
    pub data: DataConfig,
    pub sets: Vec<GeneratedSet>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence_and_create_objects() {
        let mut v: Value = serde_json::from_str(r#"{"train": {"lr": 0.1}}"#).unwrap();
        apply_override(&mut v, "train.lr=0.5").unwrap();
        apply_override(&mut v, "train.alpha_policy.mode=fixed").unwrap();
        apply_override(&mut v, "method=source_only").unwrap();
        assert_eq!(v["train"]["lr"], 0.5);
        assert_eq!(v["train"]["alpha_policy"]["mode"], "fixed");
        assert_eq!(v["method"], "source_only");
        assert!(apply_override(&mut v, "train.lr.x=1").is_err());
        assert!(apply_override(&mut v, "noequals").is_err());
    }

    #[test]
    fn data_overrides_edit_the_task_default() {
        let cfg = ExperimentConfig::from_json(r#"{"task": {"kind": "pose", "joints": 4, "width": 16}}"#, &["data.source.count=10".into()]).unwrap();
        let mut want = DataConfig::default_for(&cfg.task);
        if let DatasetSpec::SynthKeypoints { count, .. } = &mut want.source {
            *count = 10;
        }
        assert_eq!(cfg.data, Some(want));
    }

    #[test]
    fn config_defaults_and_field_errors() {
        let cfg = ExperimentConfig::from_json("{}", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let err = ExperimentConfig::from_json("{}", &["train.lr=-1".into()]).unwrap_err();
        assert!(err.is_usage() && err.to_string().contains("`lr`"));
        assert!(ExperimentConfig::from_json(r#"{"trian": {}}"#, &[]).unwrap_err().is_usage());
    }
}
