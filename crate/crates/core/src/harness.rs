//! Experiment orchestration: the continual training loop over an experience
//! stream, photometric augmentation, ablation sweeps, and reporting.
//!
//! One run trains the detector experience by experience with SGD, mixing in
//! replay data when enabled and a distillation term against the previous
//! experience's teacher snapshot, evaluates on the whole test set after each
//! experience, and writes checkpoints plus a canonical metrics record. All
//! randomness derives from the config seed through tagged substreams, so a
//! run is exactly reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{
    assign_targets, decode_detections, detection_loss, forward_infer, forward_train_full,
    init_params, save_checkpoint, DetectorError, ModelConfig, ParamSet,
};
use crate::distill::{
    attention_distill_loss, feature_distill_loss, logit_distill_loss, nonlocal_distill_loss,
    snapshot_teacher, total_loss, DistillConfig, DistillError, DistillVariant, RelationModule,
    TeacherSnapshot,
};
use crate::evalkit::{
    average_map, evaluate, Box4, Detection, EvalConfig, EvalError, GtObject, LabelSpace,
};
use crate::replay::{Entry, ReplayBuffer, ReplayError, SampleRef, TaskMeta};
use crate::rng::{mix, stream};
use crate::streamgen::{load_benchmark, Benchmark, Experience, ImageU8, Sample, StreamError, TrackMode};
use crate::tensor::Tensor;

/// Decode settings used for every evaluation pass.
pub const SCORE_THRESHOLD: f64 = 0.02;
pub const NMS_IOU: f64 = 0.6;
pub const MAX_DETECTIONS: usize = 100;

/// Substream tags (seed domain separation).
pub const TAG_SHUFFLE: u64 = 0x50;
pub const TAG_PMD: u64 = 0x51;
pub const TAG_BUFFER: u64 = 0x52;
pub const TAG_RELATION_INIT: u64 = 0x53;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("buffer audit violation:\n{0}")]
    Audit(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global L2 gradient-norm clip; None disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip_norm: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_grad_clip() -> Option<f64> {
    Some(35.0)
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.04,
            momentum: 0.9,
            epochs: 3,
            batch_size: 1,
            grad_clip_norm: Some(35.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    pub enabled: bool,
    pub capacity: usize,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            enabled: true,
            capacity: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pmd_enabled: bool,
    /// Additive brightness shift bound, 8-bit units.
    #[serde(default = "default_brightness")]
    pub brightness_delta: f64,
    #[serde(default = "default_contrast")]
    pub contrast_range: (f64, f64),
    #[serde(default = "default_contrast")]
    pub saturation_range: (f64, f64),
    /// Hue rotation bound in degrees.
    #[serde(default = "default_hue")]
    pub hue_delta: f64,
}

fn default_brightness() -> f64 {
    32.0
}

fn default_contrast() -> (f64, f64) {
    (0.5, 1.5)
}

fn default_hue() -> f64 {
    18.0
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pmd_enabled: false,
            brightness_delta: 32.0,
            contrast_range: (0.5, 1.5),
            saturation_range: (0.5, 1.5),
            hue_delta: 18.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to a serialized benchmark manifest.
    pub benchmark: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub replay: ReplayOptions,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Integer input upsampling applied before the network; detections are
    /// mapped back to native coordinates, so metrics stay comparable.
    #[serde(default = "default_input_scale")]
    pub input_scale: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn default_input_scale() -> usize {
    1
}

impl ExperimentConfig {
    /// Desk-scale defaults: a small three-level model that trains in minutes.
    pub fn desk(benchmark: PathBuf, output_dir: PathBuf, seed: u64) -> Self {
        ExperimentConfig {
            benchmark,
            model: ModelConfig {
                num_classes: 10,
                fpn_strides: vec![8, 16, 32],
                channels: 16,
                nonlocal_enabled: true,
                nonlocal_embed_channels: 8,
                head_convs: 1,
            },
            distill: DistillConfig::default(),
            replay: ReplayOptions::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            input_scale: 2,
            seed,
            output_dir,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.optimizer.epochs < 1 {
            return Err(HarnessError::Config("epochs must be >= 1".into()));
        }
        if self.optimizer.batch_size < 1 {
            return Err(HarnessError::Config("batch size must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) || !self.optimizer.learning_rate.is_finite() {
            return Err(HarnessError::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(HarnessError::Config("momentum must be in [0, 1)".into()));
        }
        if let Some(c) = self.optimizer.grad_clip_norm {
            if !(c > 0.0) {
                return Err(HarnessError::Config("grad clip norm must be > 0".into()));
            }
        }
        if !(1..=4).contains(&self.input_scale) {
            return Err(HarnessError::Config("input scale must be in 1..=4".into()));
        }
        if self.replay.enabled && self.replay.capacity == 0 {
            return Err(HarnessError::Config(
                "replay capacity must be >= 1 when replay is enabled".into(),
            ));
        }
        self.model.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, serde_json::to_string_pretty(self).expect("config serializes"))?;
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// run records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub per_experience_map: Vec<f64>,
    pub average_map: f64,
    /// Per label, per experience: AP on the whole test set.
    pub per_label_ap: Vec<BTreeMap<u32, f64>>,
    /// Mean total loss per optimizer step, one curve per experience.
    pub loss_curves: Vec<Vec<f64>>,
    pub buffer_audits: Vec<String>,
    pub wall_clock_seconds: f64,
}

/// The deterministic subset of a [`RunRecord`]: everything except wall clock
/// and host paths. Two runs with the same config and seed serialize this to
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub per_experience_map: Vec<f64>,
    pub average_map: f64,
    pub per_label_ap: Vec<BTreeMap<u32, f64>>,
    pub loss_curves: Vec<Vec<f64>>,
    pub buffer_audits: Vec<String>,
}

impl From<&RunRecord> for MetricsRecord {
    fn from(r: &RunRecord) -> Self {
        MetricsRecord {
            seed: r.config.seed,
            per_experience_map: r.per_experience_map.clone(),
            average_map: r.average_map,
            per_label_ap: r.per_label_ap.clone(),
            loss_curves: r.loss_curves.clone(),
            buffer_audits: r.buffer_audits.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// photometric distortion

fn map_pixels(image: &ImageU8, f: impl Fn([f64; 3]) -> [f64; 3]) -> ImageU8 {
    let mut out = image.clone();
    for px in out.data.chunks_mut(3) {
        let rgb = f([px[0] as f64, px[1] as f64, px[2] as f64]);
        for c in 0..3 {
            px[c] = rgb[c].clamp(0.0, 255.0).round() as u8;
        }
    }
    out
}

pub fn apply_brightness(image: &ImageU8, delta: f64) -> ImageU8 {
    map_pixels(image, |p| [p[0] + delta, p[1] + delta, p[2] + delta])
}

pub fn apply_contrast(image: &ImageU8, factor: f64) -> ImageU8 {
    map_pixels(image, |p| [p[0] * factor, p[1] * factor, p[2] * factor])
}

pub fn apply_saturation(image: &ImageU8, factor: f64) -> ImageU8 {
    map_pixels(image, |p| {
        let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        [
            gray + (p[0] - gray) * factor,
            gray + (p[1] - gray) * factor,
            gray + (p[2] - gray) * factor,
        ]
    })
}

/// Hue rotation in YIQ space; luma is preserved, geometry untouched.
pub fn apply_hue(image: &ImageU8, degrees: f64) -> ImageU8 {
    let th = degrees.to_radians();
    let (cs, sn) = (th.cos(), th.sin());
    map_pixels(image, |p| {
        let y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        let i = 0.596 * p[0] - 0.274 * p[1] - 0.322 * p[2];
        let q = 0.211 * p[0] - 0.523 * p[1] + 0.312 * p[2];
        let ir = i * cs - q * sn;
        let qr = i * sn + q * cs;
        [
            y + 0.956 * ir + 0.621 * qr,
            y - 0.272 * ir - 0.647 * qr,
            y - 1.106 * ir + 1.703 * qr,
        ]
    })
}

/// Randomized photometric distortion: brightness, contrast, saturation and
/// hue, each applied with probability one half. Annotations stay valid
/// because geometry never changes.
pub fn photometric_distortion<R: Rng>(
    image: &ImageU8,
    params: &AugmentConfig,
    rng: &mut R,
) -> ImageU8 {
    let mut out = image.clone();
    if rng.gen_bool(0.5) {
        let d = rng.gen_range(-params.brightness_delta..=params.brightness_delta);
        out = apply_brightness(&out, d);
    }
    if rng.gen_bool(0.5) {
        let c = rng.gen_range(params.contrast_range.0..=params.contrast_range.1);
        out = apply_contrast(&out, c);
    }
    if rng.gen_bool(0.5) {
        let s = rng.gen_range(params.saturation_range.0..=params.saturation_range.1);
        out = apply_saturation(&out, s);
    }
    if rng.gen_bool(0.5) {
        let h = rng.gen_range(-params.hue_delta..=params.hue_delta);
        out = apply_hue(&out, h);
    }
    out
}

// ---------------------------------------------------------------------------
// training

/// Nearest-neighbor upsampling of a (C, H, W) tensor by an integer factor.
pub fn upsample_image(image: &Tensor, scale: usize) -> Tensor {
    if scale == 1 {
        return image.clone();
    }
    let sh = image.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let src = image.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..oh {
            let row = (ci * h + y / scale) * w;
            let orow = (ci * oh + y) * ow;
            for x in 0..ow {
                dst[orow + x] = src[row + x / scale];
            }
        }
    }
    out
}

/// One resolved training example, in model input coordinates.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor,
    pub boxes: Vec<Box4>,
    pub labels: Vec<u32>,
}

pub fn to_train_sample(sample: &Sample, mode: TrackMode, image: Tensor, scale: usize) -> TrainSample {
    let s = scale as f64;
    TrainSample {
        image,
        boxes: sample
            .boxes
            .iter()
            .map(|b| [b[0] as f64 * s, b[1] as f64 * s, b[2] as f64 * s, b[3] as f64 * s])
            .collect(),
        labels: (0..sample.boxes.len())
            .map(|i| sample.label_of(i, mode))
            .collect(),
    }
}

pub fn sample_gts(sample: &Sample, mode: TrackMode) -> Vec<GtObject> {
    (0..sample.boxes.len())
        .map(|i| {
            let b = sample.boxes[i];
            GtObject {
                bbox: [b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64],
                label: sample.label_of(i, mode),
                is_reference: i == sample.main_object_index,
            }
        })
        .collect()
}

pub fn eval_config(mode: TrackMode) -> EvalConfig {
    match mode {
        TrackMode::Category => EvalConfig {
            label_space: LabelSpace::Category,
            reference_only: false,
            ..EvalConfig::default()
        },
        TrackMode::Instance => EvalConfig {
            label_space: LabelSpace::Instance,
            reference_only: true,
            ..EvalConfig::default()
        },
    }
}

/// Detector, relation module and SGD state for one run.
///
/// `step` processes a mini-batch: per image it builds a fresh tape, computes
/// supervised + distillation losses, scales the total by 1/batch and runs
/// backward; gradients accumulate by parameter name. The SGD update is
/// v = momentum * v + g; p -= lr * v, in name order.
pub struct Trainer {
    cfg: ModelConfig,
    opt: OptimizerConfig,
    pub params: ParamSet,
    pub relation: RelationModule,
    velocity: BTreeMap<String, Tensor>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let params = init_params(&cfg.model, cfg.seed)?;
        let relation = RelationModule::init(
            cfg.model.channels,
            cfg.model.nonlocal_embed_channels,
            &cfg.model.fpn_strides,
            mix(cfg.seed, &[TAG_RELATION_INIT]),
        );
        Ok(Trainer {
            cfg: cfg.model.clone(),
            opt: cfg.optimizer.clone(),
            params,
            relation,
            velocity: BTreeMap::new(),
        })
    }

    /// Returns the mean total loss over the batch.
    pub fn step(
        &mut self,
        batch: &[TrainSample],
        teacher: Option<&TeacherSnapshot>,
        distill: &DistillConfig,
    ) -> Result<f64, HarnessError> {
        assert!(!batch.is_empty(), "empty batch");
        let inv = 1.0 / batch.len() as f64;
        let mut grads_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let active = teacher.is_some() && distill.variant != DistillVariant::None;

        for ts in batch {
            let mut tape = crate::autodiff::Tape::new();
            let vars = self.params.register(&mut tape);
            let rel_vars = if active && distill.variant == DistillVariant::NonLocal {
                self.relation.register(&mut tape)
            } else {
                BTreeMap::new()
            };
            let shape = ts.image.shape();
            let (h, w) = (shape[1], shape[2]);
            let fwd = forward_train_full(&mut tape, &vars, &self.cfg, &ts.image)?;
            let targets = assign_targets(&ts.boxes, &ts.labels, h, w, &self.cfg.fpn_strides);
            let (cls, reg) = detection_loss(&mut tape, &fwd.levels, &targets, self.cfg.num_classes);

            let distill_term = match (active, teacher) {
                (true, Some(t)) => Some(match distill.variant {
                    DistillVariant::NonLocal => {
                        let tf = t.features(&ts.image)?;
                        nonlocal_distill_loss(&mut tape, &tf, &fwd.features, &rel_vars, distill)?
                    }
                    DistillVariant::Feature => {
                        let tf = t.features(&ts.image)?;
                        feature_distill_loss(&mut tape, &tf, &fwd.features, distill)?
                    }
                    DistillVariant::Attention => {
                        let tf = t.features(&ts.image)?;
                        attention_distill_loss(&mut tape, &tf, &fwd.features, distill)?
                    }
                    DistillVariant::Logit => {
                        let tc = t.dense_cls(&ts.image)?;
                        let sc: Vec<(usize, crate::autodiff::VarId)> =
                            fwd.levels.iter().map(|l| (l.stride, l.cls)).collect();
                        logit_distill_loss(&mut tape, &tc, &sc, distill)?
                    }
                    DistillVariant::None => unreachable!(),
                }),
                _ => None,
            };

            let total = total_loss(&mut tape, (cls, reg), distill_term, distill);
            loss_sum += tape.value(total).item();
            let scaled = tape.scale(total, inv);
            let mut grads = tape.backward(scaled);
            for (name, var) in vars.iter().chain(rel_vars.iter()) {
                if let Some(g) = grads.take(*var) {
                    match grads_acc.get_mut(name) {
                        Some(acc) => acc.add_scaled(&g, 1.0),
                        None => {
                            grads_acc.insert(name.clone(), g);
                        }
                    }
                }
            }
        }

        let clip = clip_factor(&grads_acc, self.opt.grad_clip_norm);
        for (name, mut g) in grads_acc {
            if clip != 1.0 {
                for gi in g.data_mut() {
                    *gi *= clip;
                }
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.opt.momentum * *vi + gi;
            }
            let target = if name.starts_with("relation.") {
                self.relation.params_mut().get_mut(&name)
            } else {
                self.params.get_mut(&name)
            };
            target.add_scaled(v, -self.opt.learning_rate);
        }
        Ok(loss_sum * inv)
    }
}

/// Scale factor that caps the global L2 norm of a gradient set.
pub fn clip_factor(grads: &BTreeMap<String, Tensor>, max_norm: Option<f64>) -> f64 {
    let Some(max_norm) = max_norm else {
        return 1.0;
    };
    let sq: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// the continual loop

fn resolve<'a>(benchmark: &'a Benchmark, entry: &Entry) -> &'a Sample {
    &benchmark.train.experiences[entry.sample.experience].samples[entry.sample.index]
}

fn task_meta(task: usize, experience: &Experience) -> TaskMeta {
    let mut video_frames: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &experience.samples {
        *video_frames.entry(s.video_id).or_insert(0) += 1;
    }
    TaskMeta {
        task_index: task,
        video_frames,
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let benchmark = load_benchmark(&cfg.benchmark)?;
    let mode = benchmark.spec.track_mode;
    let expected_classes = match mode {
        TrackMode::Category => benchmark.spec.num_categories as usize,
        TrackMode::Instance => benchmark.spec.num_instances() as usize,
    };
    if cfg.model.num_classes != expected_classes {
        return Err(HarnessError::Config(format!(
            "model has {} classes but the benchmark needs {expected_classes}",
            cfg.model.num_classes
        )));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let started = Instant::now();

    let mut trainer = Trainer::new(cfg)?;
    let mut buffer = ReplayBuffer::new(cfg.replay.capacity.max(1), mix(cfg.seed, &[TAG_BUFFER]));
    let mut history: Vec<TaskMeta> = Vec::new();
    let mut teacher: Option<TeacherSnapshot> = None;

    let test_gts: Vec<Vec<GtObject>> = benchmark
        .test
        .iter()
        .map(|s| sample_gts(s, mode))
        .collect();
    let eval_cfg = eval_config(mode);

    let mut per_experience_map = Vec::new();
    let mut per_label_ap = Vec::new();
    let mut loss_curves = Vec::new();
    let mut buffer_audits = Vec::new();

    for (e, experience) in benchmark.train.experiences.iter().enumerate() {
        let task = e + 1;
        let current_refs: Vec<(SampleRef, u32)> = experience
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (SampleRef { experience: e, index: i }, s.video_id))
            .collect();
        let pool: Vec<Entry> = if cfg.replay.enabled {
            buffer.training_pool(&current_refs, task)
        } else {
            current_refs
                .iter()
                .map(|&(sample, video_id)| Entry {
                    sample,
                    task_index: task,
                    video_id,
                })
                .collect()
        };

        let mut curve = Vec::new();
        for epoch in 0..cfg.optimizer.epochs {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            let mut rng = stream(cfg.seed, &[TAG_SHUFFLE, task as u64, epoch as u64]);
            order.shuffle(&mut rng);
            for (step, chunk) in order.chunks(cfg.optimizer.batch_size).enumerate() {
                let batch: Vec<TrainSample> = chunk
                    .iter()
                    .enumerate()
                    .map(|(slot, &pi)| {
                        let sample = resolve(&benchmark, &pool[pi]);
                        let raw = if cfg.augment.pmd_enabled {
                            let mut rng = stream(
                                cfg.seed,
                                &[TAG_PMD, task as u64, epoch as u64, step as u64, slot as u64],
                            );
                            photometric_distortion(&sample.image, &cfg.augment, &mut rng)
                                .to_tensor()
                        } else {
                            sample.image.to_tensor()
                        };
                        let image = upsample_image(&raw, cfg.input_scale);
                        to_train_sample(sample, mode, image, cfg.input_scale)
                    })
                    .collect();
                let loss = trainer.step(&batch, teacher.as_ref(), &cfg.distill)?;
                curve.push(loss);
            }
        }
        loss_curves.push(curve);

        // whole-test-set evaluation with the model as-is
        let mut preds: Vec<Vec<Detection>> = Vec::with_capacity(benchmark.test.len());
        for s in &benchmark.test {
            let img = upsample_image(&s.image.to_tensor(), cfg.input_scale);
            let out = forward_infer(&cfg.model, &trainer.params, &img)?;
            let mut dets = decode_detections(
                &out,
                s.image.height as usize * cfg.input_scale,
                s.image.width as usize * cfg.input_scale,
                SCORE_THRESHOLD,
                NMS_IOU,
                MAX_DETECTIONS,
            )?;
            if cfg.input_scale > 1 {
                let inv = 1.0 / cfg.input_scale as f64;
                for d in &mut dets {
                    for v in &mut d.bbox {
                        *v *= inv;
                    }
                }
            }
            preds.push(dets);
        }
        write_detection_dump(
            &cfg.output_dir.join(format!("detections_exp{task}.csv")),
            &benchmark.test,
            &preds,
        )?;
        let result = evaluate(&preds, &test_gts, &eval_cfg)?;
        per_experience_map.push(result.map);
        per_label_ap.push(result.per_label_ap);

        teacher = Some(snapshot_teacher(&trainer.params, &cfg.model, task));
        save_checkpoint(
            &cfg.output_dir.join(format!("checkpoint_exp{task}.ckpt")),
            &cfg.model,
            &trainer.params,
        )?;

        if cfg.replay.enabled {
            buffer.update_buffer(&current_refs, task)?;
            history.push(task_meta(task, experience));
            let report = buffer.audit(&history);
            if !report.is_ok() {
                return Err(HarnessError::Audit(report.to_string()));
            }
            buffer_audits.push("ok".to_string());
            buffer.save(&cfg.output_dir.join("buffer.json"))?;
        } else {
            buffer_audits.push("disabled".to_string());
        }
    }

    let record = RunRecord {
        config: cfg.clone(),
        average_map: average_map(&per_experience_map)?,
        per_experience_map,
        per_label_ap,
        loss_curves,
        buffer_audits,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(
        cfg.output_dir.join("run.json"),
        serde_json::to_string_pretty(&record).expect("record serializes"),
    )?;
    fs::write(
        cfg.output_dir.join("metrics.json"),
        serde_json::to_string_pretty(&MetricsRecord::from(&record)).expect("metrics serialize"),
    )?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// detection dumps

/// CSV schema: image_id,label,score,x_min,y_min,x_max,y_max.
pub fn write_detection_dump(
    path: &Path,
    test_samples: &[Sample],
    predictions: &[Vec<Detection>],
) -> Result<(), HarnessError> {
    assert_eq!(test_samples.len(), predictions.len());
    let mut out = String::from("image_id,label,score,x_min,y_min,x_max,y_max\n");
    for (s, preds) in test_samples.iter().zip(predictions) {
        let id = s.image_name();
        for d in preds {
            out.push_str(&format!(
                "{id},{},{},{},{},{},{}\n",
                d.label, d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a detection dump back into per-image lists aligned with the test
/// set; unknown image ids or malformed rows are parse errors.
pub fn read_detection_dump(
    path: &Path,
    test_samples: &[Sample],
) -> Result<Vec<Vec<Detection>>, HarnessError> {
    let index: BTreeMap<String, usize> = test_samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.image_name(), i))
        .collect();
    let text = fs::read_to_string(path)?;
    let mut preds = vec![Vec::new(); test_samples.len()];
    let err = |line: usize, message: String| HarnessError::Parse {
        path: path.to_path_buf(),
        message: format!("line {}: {message}", line + 1),
    };
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(err(ln, format!("expected 7 fields, got {}", fields.len())));
        }
        let &image = index
            .get(fields[0])
            .ok_or_else(|| err(ln, format!("unknown image id `{}`", fields[0])))?;
        let label: u32 = fields[1]
            .parse()
            .map_err(|e| err(ln, format!("bad label: {e}")))?;
        let mut nums = [0.0f64; 5];
        for (i, f) in fields[2..].iter().enumerate() {
            nums[i] = f
                .parse()
                .map_err(|e| err(ln, format!("bad number `{f}`: {e}")))?;
        }
        preds[image].push(Detection {
            bbox: [nums[1], nums[2], nums[3], nums[4]],
            label,
            score: nums[0],
        });
    }
    Ok(preds)
}

// ---------------------------------------------------------------------------
// ablations

#[derive(Debug, Clone, PartialEq)]
pub enum AblationAxis {
    Replay,
    Pmd,
    NonLocalClassifier,
    Distill(Vec<DistillVariant>),
}

/// Cross-product of the requested axes over the base config, in a stable
/// order (first axis varies slowest). Empty axes give the single baseline.
pub fn ablation_grid(
    base: &ExperimentConfig,
    axes: &[AblationAxis],
) -> Vec<(String, ExperimentConfig)> {
    let mut rows: Vec<(String, ExperimentConfig)> = vec![(String::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::new();
        for (label, cfg) in &rows {
            let join = |tag: &str| {
                if label.is_empty() {
                    tag.to_string()
                } else {
                    format!("{label},{tag}")
                }
            };
            match axis {
                AblationAxis::Replay => {
                    for on in [false, true] {
                        let mut c = cfg.clone();
                        c.replay.enabled = on;
                        next.push((join(&format!("replay={}", onoff(on))), c));
                    }
                }
                AblationAxis::Pmd => {
                    for on in [false, true] {
                        let mut c = cfg.clone();
                        c.augment.pmd_enabled = on;
                        next.push((join(&format!("pmd={}", onoff(on))), c));
                    }
                }
                AblationAxis::NonLocalClassifier => {
                    for on in [false, true] {
                        let mut c = cfg.clone();
                        c.model.nonlocal_enabled = on;
                        next.push((join(&format!("nlcls={}", onoff(on))), c));
                    }
                }
                AblationAxis::Distill(variants) => {
                    for v in variants {
                        let mut c = cfg.clone();
                        c.distill.variant = *v;
                        next.push((join(&format!("distill={v}")), c));
                    }
                }
            }
        }
        rows = next;
    }
    for (label, _) in rows.iter_mut() {
        if label.is_empty() {
            *label = "baseline".to_string();
        }
    }
    rows
}

fn onoff(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mean_average_map: f64,
    pub stddev: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// One JSON line per finished run, appended to runs.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLine {
    pub label: String,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
}

/// Run every grid cell over every seed. Each run writes to its own output
/// directory under `<base>/ablate/`; a line per run is appended to
/// runs.jsonl and the summary table goes to ablation.csv.
pub fn run_ablation(
    base: &ExperimentConfig,
    axes: &[AblationAxis],
    seeds: &[u64],
) -> Result<AblationTable, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one seed".into()));
    }
    fs::create_dir_all(&base.output_dir)?;
    let runs_path = base.output_dir.join("runs.jsonl");
    let mut runs_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&runs_path)?;

    let mut rows = Vec::new();
    for (label, cell) in ablation_grid(base, axes) {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = cell.clone();
            cfg.seed = seed;
            cfg.output_dir = base
                .output_dir
                .join("ablate")
                .join(label.replace(['=', ','], "_"))
                .join(format!("seed{seed}"));
            let record = run_experiment(&cfg)?;
            let line = RunLine {
                label: label.clone(),
                metrics: MetricsRecord::from(&record),
            };
            writeln!(
                runs_file,
                "{}",
                serde_json::to_string(&line).expect("run line serializes")
            )?;
            per_seed.push(record.average_map);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let stddev = if per_seed.len() < 2 {
            0.0
        } else {
            let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (per_seed.len() - 1) as f64;
            var.sqrt()
        };
        rows.push(AblationRow {
            label,
            mean_average_map: mean,
            stddev,
            per_seed,
        });
    }

    let mut csv = String::from("label,mean_average_map,stddev,per_seed\n");
    for r in &rows {
        let seeds_cell = r
            .per_seed
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(";");
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.label, r.mean_average_map, r.stddev, seeds_cell
        ));
    }
    fs::write(base.output_dir.join("ablation.csv"), csv)?;
    Ok(AblationTable { rows })
}

// ---------------------------------------------------------------------------
// reporting

/// A named score series for the report: per-experience mAPs plus optional
/// loss curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub per_experience_map: Vec<f64>,
    #[serde(default)]
    pub loss_curves: Vec<Vec<f64>>,
}

impl ReportEntry {
    pub fn from_record(name: &str, record: &RunRecord) -> Self {
        ReportEntry {
            name: name.to_string(),
            per_experience_map: record.per_experience_map.clone(),
            loss_curves: record.loss_curves.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub map_plot: PathBuf,
    pub loss_plot: PathBuf,
}

/// Load report entries from a runs.jsonl file.
pub fn read_runs_jsonl(path: &Path) -> Result<Vec<ReportEntry>, HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let run: RunLine = serde_json::from_str(line).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", ln + 1),
        })?;
        entries.push(ReportEntry {
            name: format!("{} seed{}", run.label, run.metrics.seed),
            per_experience_map: run.metrics.per_experience_map,
            loss_curves: run.metrics.loss_curves,
        });
    }
    Ok(entries)
}

/// Write the comparison table (sorted by average mAP, descending) and the
/// per-experience mAP and loss plots.
pub fn report(entries: &[ReportEntry], out_dir: &Path) -> Result<ReportFiles, HarnessError> {
    if entries.is_empty() {
        return Err(HarnessError::Config("report needs at least one record".into()));
    }
    fs::create_dir_all(out_dir)?;

    let mut scored: Vec<(&ReportEntry, f64)> = entries
        .iter()
        .map(|e| Ok((e, average_map(&e.per_experience_map)?)))
        .collect::<Result<_, EvalError>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.name.cmp(&b.0.name)));

    let max_exps = entries
        .iter()
        .map(|e| e.per_experience_map.len())
        .max()
        .unwrap_or(0);
    let mut csv = String::from("name,average_map");
    for i in 1..=max_exps {
        csv.push_str(&format!(",map_exp{i}"));
    }
    csv.push('\n');
    for (e, avg) in &scored {
        csv.push_str(&format!("{},{avg}", e.name));
        for i in 0..max_exps {
            match e.per_experience_map.get(i) {
                Some(v) => csv.push_str(&format!(",{v}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    let table = out_dir.join("report.csv");
    fs::write(&table, csv)?;

    let map_series: Vec<(String, Vec<f64>)> = scored
        .iter()
        .map(|(e, _)| (e.name.clone(), e.per_experience_map.clone()))
        .collect();
    let map_plot = out_dir.join("map_plot.svg");
    write_svg_plot(&map_plot, &map_series, "experience", "mAP", Some((0.0, 1.0)))?;

    let loss_series: Vec<(String, Vec<f64>)> = scored
        .iter()
        .filter(|(e, _)| !e.loss_curves.is_empty())
        .map(|(e, _)| {
            let flat: Vec<f64> = e.loss_curves.iter().flatten().copied().collect();
            (e.name.clone(), flat)
        })
        .collect();
    let loss_plot = out_dir.join("loss_plot.svg");
    write_svg_plot(&loss_plot, &loss_series, "step", "loss", None)?;

    Ok(ReportFiles {
        table,
        map_plot,
        loss_plot,
    })
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal hand-rolled SVG line plot: one polyline plus one circle marker per
/// data point, a legend, and axis labels.
fn write_svg_plot(
    path: &Path,
    series: &[(String, Vec<f64>)],
    x_label: &str,
    y_label: &str,
    y_range: Option<(f64, f64)>,
) -> Result<(), HarnessError> {
    let (w, h) = (720.0, 440.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let (ylo, yhi) = y_range.unwrap_or_else(|| {
        let hi = series
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .fold(f64::MIN, f64::max);
        (0.0, if hi > 0.0 { hi * 1.05 } else { 1.0 })
    });

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{x_label}</text>\n",
        ml + pw / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    ));

    let px = |i: usize| {
        if max_len <= 1 {
            ml + pw / 2.0
        } else {
            ml + pw * i as f64 / (max_len - 1) as f64
        }
    };
    let py = |v: f64| {
        let t = ((v - ylo) / (yhi - ylo)).clamp(0.0, 1.0);
        h - mb - ph * t
    };

    for (si, (name, values)) in series.iter().enumerate() {
        let color = SVG_COLORS[si % SVG_COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v)))
            .collect();
        if points.len() > 1 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                points.join(" ")
            ));
        }
        for (i, &v) in values.iter().enumerate() {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(i),
                py(v)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            ml + 8.0,
            mt + 14.0 + 16.0 * si as f64
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streamgen::{generate_benchmark, serialize_benchmark, BenchmarkSpec};

    fn micro_benchmark(dir: &Path, seed: u64) -> PathBuf {
        let spec = BenchmarkSpec {
            num_experiences: 2,
            num_categories: 4,
            num_scenes: 2,
            videos_per_scene: 2,
            frames_per_video: 4,
            image_size: 32,
            track_mode: TrackMode::Category,
            seed,
        };
        let (train, test) = generate_benchmark(&spec).unwrap();
        let benchmark = Benchmark { spec, train, test };
        serialize_benchmark(&benchmark, dir).unwrap()
    }

    fn micro_config(manifest: PathBuf, out: PathBuf, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            benchmark: manifest,
            model: ModelConfig {
                num_classes: 4,
                fpn_strides: vec![8],
                channels: 8,
                nonlocal_enabled: true,
                nonlocal_embed_channels: 4,
                head_convs: 1,
            },
            distill: DistillConfig::default(),
            replay: ReplayOptions {
                enabled: true,
                capacity: 8,
            },
            optimizer: OptimizerConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                epochs: 1,
                batch_size: 4,
                grad_clip_norm: Some(35.0),
            },
            augment: AugmentConfig::default(),
            input_scale: 1,
            seed,
            output_dir: out,
        }
    }

    #[test]
    fn config_validation_rules() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path().join("m.json"), dir.path().join("out"), 1);
        assert!(cfg.validate().is_ok());
        let mut bad = cfg.clone();
        bad.optimizer.epochs = 0;
        assert!(matches!(bad.validate(), Err(HarnessError::Config(_))));
        let mut bad = cfg.clone();
        bad.optimizer.batch_size = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.optimizer.learning_rate = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.replay.capacity = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pmd_identity_params_return_input() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_benchmark(dir.path(), 3);
        let benchmark = load_benchmark(&manifest).unwrap();
        let image = &benchmark.test[0].image;
        let identity = AugmentConfig {
            pmd_enabled: true,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
            hue_delta: 0.0,
        };
        // every gate choice yields the identity transform
        for s in 0..8 {
            let mut rng = stream(s, &[0]);
            let out = photometric_distortion(image, &identity, &mut rng);
            assert_eq!(out, *image, "seed {s}");
        }
    }

    #[test]
    fn pmd_brightness_adds_and_clips() {
        let image = ImageU8 {
            width: 2,
            height: 1,
            data: vec![0, 100, 250, 255, 7, 128],
        };
        let out = apply_brightness(&image, 10.0);
        assert_eq!(out.data, vec![10, 110, 255, 255, 17, 138]);
        let down = apply_brightness(&image, -10.0);
        assert_eq!(down.data, vec![0, 90, 240, 245, 0, 118]);
    }

    #[test]
    fn pmd_is_deterministic_and_geometry_free() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_benchmark(dir.path(), 4);
        let benchmark = load_benchmark(&manifest).unwrap();
        let sample = &benchmark.test[0];
        let params = AugmentConfig {
            pmd_enabled: true,
            ..AugmentConfig::default()
        };
        let a = photometric_distortion(&sample.image, &params, &mut stream(9, &[1]));
        let b = photometric_distortion(&sample.image, &params, &mut stream(9, &[1]));
        assert_eq!(a, b);
        assert_eq!(a.width, sample.image.width);
        assert_eq!(a.height, sample.image.height);
    }

    #[test]
    fn detection_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_benchmark(dir.path(), 5);
        let benchmark = load_benchmark(&manifest).unwrap();
        let mut preds: Vec<Vec<Detection>> = vec![Vec::new(); benchmark.test.len()];
        preds[0].push(Detection {
            bbox: [1.5, 2.0, 10.25, 12.0],
            label: 3,
            score: 0.75,
        });
        preds[1].push(Detection {
            bbox: [0.0, 0.0, 5.0, 5.0],
            label: 1,
            score: 0.5,
        });
        let path = dir.path().join("dump.csv");
        write_detection_dump(&path, &benchmark.test, &preds).unwrap();
        let parsed = read_detection_dump(&path, &benchmark.test).unwrap();
        assert_eq!(parsed.len(), preds.len());
        assert_eq!(parsed[0][0].bbox, preds[0][0].bbox);
        assert_eq!(parsed[0][0].label, 3);
        assert_eq!(parsed[0][0].score, 0.75);
        assert_eq!(parsed[1][0].label, 1);

        // malformed rows are parse errors
        fs::write(&path, "image_id,label,score,x_min,y_min,x_max,y_max\nnope,1,0.5,0,0,1,1\n")
            .unwrap();
        assert!(matches!(
            read_detection_dump(&path, &benchmark.test),
            Err(HarnessError::Parse { .. })
        ));
    }

    #[test]
    fn ablation_grid_counts() {
        let dir = tempfile::tempdir().unwrap();
        let base = micro_config(dir.path().join("m.json"), dir.path().join("out"), 1);
        assert_eq!(ablation_grid(&base, &[]).len(), 1);
        assert_eq!(ablation_grid(&base, &[])[0].0, "baseline");
        assert_eq!(ablation_grid(&base, &[AblationAxis::Replay]).len(), 2);
        let table4 = ablation_grid(
            &base,
            &[AblationAxis::Distill(vec![
                DistillVariant::None,
                DistillVariant::Feature,
                DistillVariant::Attention,
                DistillVariant::NonLocal,
                DistillVariant::Logit,
            ])],
        );
        assert_eq!(table4.len(), 5);
        let cross = ablation_grid(&base, &[AblationAxis::Replay, AblationAxis::Pmd]);
        assert_eq!(cross.len(), 4);
        assert_eq!(cross[0].0, "replay=off,pmd=off");
        assert!(!cross[3].1.clone().validate().is_err());
    }

    #[test]
    fn report_examples() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ReportEntry {
                name: "a".into(),
                per_experience_map: vec![0.5, 0.6],
                loss_curves: vec![vec![1.0, 0.8], vec![0.7]],
            },
            ReportEntry {
                name: "b".into(),
                per_experience_map: vec![0.9, 0.7],
                loss_curves: Vec::new(),
            },
        ];
        let files = report(&entries, dir.path()).unwrap();
        let csv = fs::read_to_string(&files.table).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "name,average_map,map_exp1,map_exp2");
        // sorted descending by average; the 0.55 average prints exactly
        assert!(lines[1].starts_with("b,0.8"));
        assert_eq!(lines[2], "a,0.55,0.5,0.6");

        let svg = fs::read_to_string(&files.map_plot).unwrap();
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("<polyline"));
        let loss_svg = fs::read_to_string(&files.loss_plot).unwrap();
        assert_eq!(loss_svg.matches("<circle").count(), 3);

        assert!(report(&[], dir.path()).is_err());
    }

    #[test]
    fn five_point_plot_for_five_experiences() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![ReportEntry {
            name: "run".into(),
            per_experience_map: vec![0.2, 0.3, 0.4, 0.5, 0.6],
            loss_curves: Vec::new(),
        }];
        let files = report(&entries, dir.path()).unwrap();
        let svg = fs::read_to_string(&files.map_plot).unwrap();
        assert_eq!(svg.matches("<circle").count(), 5);
    }

    #[test]
    fn micro_run_emits_consistent_record() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_benchmark(dir.path(), 11);
        let cfg = micro_config(manifest, dir.path().join("out"), 7);
        let record = run_experiment(&cfg).unwrap();
        assert_eq!(record.per_experience_map.len(), 2);
        assert_eq!(record.average_map, average_map(&record.per_experience_map).unwrap());
        assert_eq!(record.buffer_audits, vec!["ok", "ok"]);
        assert_eq!(record.loss_curves.len(), 2);
        assert!(record.loss_curves.iter().all(|c| !c.is_empty()));
        assert!(record.per_experience_map.iter().all(|m| (0.0..=1.0).contains(m)));
        for name in [
            "run.json",
            "metrics.json",
            "buffer.json",
            "detections_exp1.csv",
            "detections_exp2.csv",
            "checkpoint_exp1.ckpt",
            "checkpoint_exp2.ckpt",
        ] {
            assert!(cfg.output_dir.join(name).exists(), "{name} missing");
        }

        // the detection dump round-trips to the recorded final mAP
        let benchmark = load_benchmark(&cfg.benchmark).unwrap();
        let preds =
            read_detection_dump(&cfg.output_dir.join("detections_exp2.csv"), &benchmark.test)
                .unwrap();
        let gts: Vec<Vec<GtObject>> = benchmark
            .test
            .iter()
            .map(|s| sample_gts(s, TrackMode::Category))
            .collect();
        let result = evaluate(&preds, &gts, &eval_config(TrackMode::Category)).unwrap();
        assert!((result.map - record.per_experience_map[1]).abs() < 1e-12);
    }

    #[test]
    fn missing_benchmark_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path().join("nope.json"), dir.path().join("out"), 1);
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn single_experience_stream_never_distills() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchmarkSpec {
            num_experiences: 1,
            num_categories: 3,
            num_scenes: 1,
            videos_per_scene: 2,
            frames_per_video: 4,
            image_size: 32,
            track_mode: TrackMode::Category,
            seed: 2,
        };
        let (train, test) = generate_benchmark(&spec).unwrap();
        let benchmark = Benchmark { spec, train, test };
        let manifest = serialize_benchmark(&benchmark, dir.path()).unwrap();
        let mut cfg = micro_config(manifest, dir.path().join("out"), 3);
        cfg.model.num_classes = 3;

        // with one experience there is never a teacher, so a nonlocal-distill
        // run and a no-distill run follow the same trajectory
        let record_a = run_experiment(&cfg).unwrap();
        let mut cfg_b = cfg.clone();
        cfg_b.distill.variant = DistillVariant::None;
        cfg_b.output_dir = dir.path().join("out_b");
        let record_b = run_experiment(&cfg_b).unwrap();
        assert_eq!(record_a.loss_curves, record_b.loss_curves);
        assert_eq!(record_a.per_experience_map, record_b.per_experience_map);
    }

    #[test]
    fn identical_config_and_seed_reproduce_metrics_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_benchmark(dir.path(), 13);
        let cfg_a = micro_config(manifest.clone(), dir.path().join("out_a"), 21);
        let mut cfg_b = micro_config(manifest, dir.path().join("out_b"), 21);
        cfg_b.output_dir = dir.path().join("out_b");
        run_experiment(&cfg_a).unwrap();
        run_experiment(&cfg_b).unwrap();
        let a = fs::read(cfg_a.output_dir.join("metrics.json")).unwrap();
        let b = fs::read(cfg_b.output_dir.join("metrics.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_run_matches_hand_built_loop() {
        // replay off, distillation off, augmentation off: the run must be a
        // plain sequential fine-tune, reproduced here from raw primitives
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_benchmark(dir.path(), 17);
        let mut cfg = micro_config(manifest, dir.path().join("out"), 5);
        cfg.replay.enabled = false;
        cfg.distill.variant = DistillVariant::None;
        let record = run_experiment(&cfg).unwrap();

        let benchmark = load_benchmark(&cfg.benchmark).unwrap();
        let mut params = init_params(&cfg.model, cfg.seed).unwrap();
        let mut velocity: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut curves = Vec::new();
        for (e, experience) in benchmark.train.experiences.iter().enumerate() {
            let task = e + 1;
            let mut curve = Vec::new();
            for epoch in 0..cfg.optimizer.epochs {
                let mut order: Vec<usize> = (0..experience.samples.len()).collect();
                let mut rng = stream(cfg.seed, &[TAG_SHUFFLE, task as u64, epoch as u64]);
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.optimizer.batch_size) {
                    let inv = 1.0 / chunk.len() as f64;
                    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
                    let mut loss_sum = 0.0;
                    for &i in chunk {
                        let sample = &experience.samples[i];
                        let ts = to_train_sample(
                            sample,
                            TrackMode::Category,
                            sample.image.to_tensor(),
                            1,
                        );
                        let mut tape = crate::autodiff::Tape::new();
                        let vars = params.register(&mut tape);
                        let fwd = forward_train_full(&mut tape, &vars, &cfg.model, &ts.image)
                            .unwrap();
                        let targets =
                            assign_targets(&ts.boxes, &ts.labels, 32, 32, &cfg.model.fpn_strides);
                        let (cls, reg) =
                            detection_loss(&mut tape, &fwd.levels, &targets, cfg.model.num_classes);
                        let total = tape.add(cls, reg);
                        loss_sum += tape.value(total).item();
                        let scaled = tape.scale(total, inv);
                        let mut grads = tape.backward(scaled);
                        for (name, var) in vars.iter() {
                            if let Some(g) = grads.take(*var) {
                                match acc.get_mut(name) {
                                    Some(a) => a.add_scaled(&g, 1.0),
                                    None => {
                                        acc.insert(name.clone(), g);
                                    }
                                }
                            }
                        }
                    }
                    let clip = clip_factor(&acc, cfg.optimizer.grad_clip_norm);
                    for (name, mut g) in acc {
                        if clip != 1.0 {
                            for gi in g.data_mut() {
                                *gi *= clip;
                            }
                        }
                        let v = velocity
                            .entry(name.clone())
                            .or_insert_with(|| Tensor::zeros(g.shape()));
                        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                            *vi = cfg.optimizer.momentum * *vi + gi;
                        }
                        params.get_mut(&name).add_scaled(v, -cfg.optimizer.learning_rate);
                    }
                    curve.push(loss_sum * inv);
                }
            }
            curves.push(curve);
        }
        assert_eq!(record.loss_curves, curves);
    }
}
