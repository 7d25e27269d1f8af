//! Teacher snapshots and the feature distillation loss family.
//!
//! The main loss matches relation features, raw FPN features passed through a
//! non-local block shared by the teacher and student branches. The plain
//! feature, spatial attention, and logit variants cover the remaining
//! ablation axis. Teacher activations always enter the losses as constants;
//! gradients reach the student branch and, for the relation loss, the
//! relation parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BackwardCtx, Operation, Tape, VarId};
use crate::detector::{
    forward_features, forward_infer, sigmoid, DenseOutputs, DetectorError, ModelConfig, NonLocal,
    ParamSet,
};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Probability clamp inside the logit loss logs.
pub const LOGIT_EPS: f64 = 1e-6;

const TAG_RELATION: u64 = 0x40;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error("level mismatch: stride {stride} missing from one branch")]
    LevelMismatch { stride: usize },
    #[error("shape mismatch at stride {stride}: teacher {teacher:?} vs student {student:?}")]
    ShapeMismatch {
        stride: usize,
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
    #[error("class channel mismatch: teacher has {teacher}, student only {student}")]
    ChannelMismatch { teacher: usize, student: usize },
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillVariant {
    None,
    NonLocal,
    Feature,
    Attention,
    Logit,
}

impl fmt::Display for DistillVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DistillVariant::None => "none",
            DistillVariant::NonLocal => "nonlocal",
            DistillVariant::Feature => "feature",
            DistillVariant::Attention => "attention",
            DistillVariant::Logit => "logit",
        };
        write!(f, "{s}")
    }
}

impl FromStr for DistillVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(DistillVariant::None),
            "nonlocal" => Ok(DistillVariant::NonLocal),
            "feature" => Ok(DistillVariant::Feature),
            "attention" => Ok(DistillVariant::Attention),
            "logit" => Ok(DistillVariant::Logit),
            other => Err(format!("unknown distillation variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub variant: DistillVariant,
    /// Loss weight, ≥ 0.
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// FPN strides to distill; empty selects every level.
    #[serde(default)]
    pub levels: Vec<usize>,
}

fn default_weight() -> f64 {
    1.0
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            variant: DistillVariant::NonLocal,
            weight: 1.0,
            levels: Vec::new(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(DistillError::InvalidConfig(format!(
                "weight must be a non-negative finite number, got {}",
                self.weight
            )));
        }
        Ok(())
    }

    pub fn selects(&self, stride: usize) -> bool {
        self.levels.is_empty() || self.levels.contains(&stride)
    }
}

/// Frozen deep copy of the detector at an experience boundary.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    params: ParamSet,
    config: ModelConfig,
    pub source_task_index: usize,
}

pub fn snapshot_teacher(
    student: &ParamSet,
    config: &ModelConfig,
    task_index: usize,
) -> TeacherSnapshot {
    TeacherSnapshot {
        params: student.clone(),
        config: config.clone(),
        source_task_index: task_index,
    }
}

impl TeacherSnapshot {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// FPN feature maps with no gradient tracking, as plain tensors.
    pub fn features(&self, image: &Tensor) -> Result<Vec<(usize, Tensor)>, DetectorError> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let feats = forward_features(&mut tape, &vars, &self.config, image)?;
        Ok(feats
            .into_iter()
            .map(|(stride, var)| (stride, tape.value(var).clone()))
            .collect())
    }

    /// Per-level dense classification logits, (num_classes, h, w).
    pub fn dense_cls(&self, image: &Tensor) -> Result<Vec<(usize, Tensor)>, DetectorError> {
        let out = forward_infer(&self.config, &self.params, image)?;
        Ok(out
            .levels
            .into_iter()
            .map(|l| (l.stride, l.cls_logits))
            .collect())
    }

    pub fn forward(&self, image: &Tensor) -> Result<DenseOutputs, DetectorError> {
        forward_infer(&self.config, &self.params, image)
    }
}

/// One non-local block per distilled FPN level, trained with the student.
/// The zero output projection makes every block start as the identity.
#[derive(Debug, Clone)]
pub struct RelationModule {
    params: ParamSet,
    strides: Vec<usize>,
}

impl RelationModule {
    pub fn init(channels: usize, embed: usize, strides: &[usize], seed: u64) -> Self {
        let mut params = ParamSet::default();
        for &s in strides {
            let std = (2.0 / channels as f64).sqrt();
            for (i, part) in ["q", "k", "v"].iter().enumerate() {
                let mut rng = stream(seed, &[TAG_RELATION, s as u64, i as u64]);
                params.insert(
                    &format!("relation.s{s}.{part}.w"),
                    Tensor::randn(&[embed, channels, 1, 1], std, &mut rng),
                );
                params.insert(&format!("relation.s{s}.{part}.b"), Tensor::zeros(&[embed]));
            }
            params.insert(
                &format!("relation.s{s}.out.w"),
                Tensor::zeros(&[channels, embed, 1, 1]),
            );
            params.insert(&format!("relation.s{s}.out.b"), Tensor::zeros(&[channels]));
        }
        RelationModule {
            params,
            strides: strides.to_vec(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Register on the training tape as gradient leaves.
    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, VarId> {
        self.params.register(tape)
    }

    pub fn block(vars: &BTreeMap<String, VarId>, stride: usize) -> NonLocal {
        let v = |part: &str| {
            *vars
                .get(&format!("relation.s{stride}.{part}"))
                .unwrap_or_else(|| panic!("relation parameter s{stride}.{part} not registered"))
        };
        NonLocal {
            wq: v("q.w"),
            bq: v("q.b"),
            wk: v("k.w"),
            bk: v("k.b"),
            wv: v("v.w"),
            bv: v("v.b"),
            wout: v("out.w"),
            bout: v("out.b"),
        }
    }
}

/// Pair up teacher and student levels selected by the config, enforcing
/// matching stride sets and shapes.
fn aligned_levels(
    tape: &Tape,
    teacher: &[(usize, Tensor)],
    student: &[(usize, VarId)],
    cfg: &DistillConfig,
) -> Result<Vec<(usize, Tensor, VarId)>, DistillError> {
    cfg.validate()?;
    let student_map: BTreeMap<usize, VarId> = student.iter().copied().collect();
    let mut out = Vec::new();
    for (stride, t) in teacher {
        if !cfg.selects(*stride) {
            continue;
        }
        let s = *student_map
            .get(stride)
            .ok_or(DistillError::LevelMismatch { stride: *stride })?;
        let s_shape = tape.value(s).shape();
        if t.shape() != s_shape {
            return Err(DistillError::ShapeMismatch {
                stride: *stride,
                teacher: t.shape().to_vec(),
                student: s_shape.to_vec(),
            });
        }
        out.push((*stride, t.clone(), s));
    }
    for (stride, _) in student {
        if cfg.selects(*stride) && !teacher.iter().any(|(ts, _)| ts == stride) {
            return Err(DistillError::LevelMismatch { stride: *stride });
        }
    }
    Ok(out)
}

fn mean_over_levels(tape: &mut Tape, terms: Vec<VarId>) -> VarId {
    if terms.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    if n > 1 {
        acc = tape.scale(acc, 1.0 / n as f64);
    }
    acc
}

/// Mean-squared difference between relation features of the two branches.
/// Teacher features enter as constants; gradients reach the student features
/// and the relation parameters through both branches.
pub fn nonlocal_distill_loss(
    tape: &mut Tape,
    teacher: &[(usize, Tensor)],
    student: &[(usize, VarId)],
    relation_vars: &BTreeMap<String, VarId>,
    cfg: &DistillConfig,
) -> Result<VarId, DistillError> {
    let pairs = aligned_levels(tape, teacher, student, cfg)?;
    let mut terms = Vec::new();
    for (stride, t, s) in pairs {
        let block = RelationModule::block(relation_vars, stride);
        let t_var = tape.constant(t);
        let (t_rel, _) = crate::detector::non_local_block(tape, &block, t_var);
        let (s_rel, _) = crate::detector::non_local_block(tape, &block, s);
        terms.push(tape.mse(s_rel, t_rel));
    }
    Ok(mean_over_levels(tape, terms))
}

/// Mean-squared difference of raw FPN features, averaged over levels.
pub fn feature_distill_loss(
    tape: &mut Tape,
    teacher: &[(usize, Tensor)],
    student: &[(usize, VarId)],
    cfg: &DistillConfig,
) -> Result<VarId, DistillError> {
    let pairs = aligned_levels(tape, teacher, student, cfg)?;
    let mut terms = Vec::new();
    for (_, t, s) in pairs {
        let t_var = tape.constant(t);
        terms.push(tape.mse(s, t_var));
    }
    Ok(mean_over_levels(tape, terms))
}

/// Softmax over spatial positions of the channel-mean absolute feature.
pub fn spatial_attention(tape: &mut Tape, features: VarId) -> VarId {
    let pooled = tape.mean_abs_channels(features);
    tape.softmax_rows(pooled)
}

/// Mean-squared difference of spatial attention maps, averaged over levels.
pub fn attention_distill_loss(
    tape: &mut Tape,
    teacher: &[(usize, Tensor)],
    student: &[(usize, VarId)],
    cfg: &DistillConfig,
) -> Result<VarId, DistillError> {
    let pairs = aligned_levels(tape, teacher, student, cfg)?;
    let mut terms = Vec::new();
    for (_, t, s) in pairs {
        let t_var = tape.constant(t);
        let t_att = spatial_attention(tape, t_var);
        let s_att = spatial_attention(tape, s);
        terms.push(tape.mse(s_att, t_att));
    }
    Ok(mean_over_levels(tape, terms))
}

/// Per-element clamped binary KL divergence, zero when the probabilities
/// match. `p` is the teacher probability, `z` the student logit.
fn binary_kl(p: f64, z: f64) -> f64 {
    let q = sigmoid(z);
    let mut loss = 0.0;
    if p > 0.0 {
        loss += p * (p.max(LOGIT_EPS).ln() - q.max(LOGIT_EPS).ln());
    }
    if p < 1.0 {
        loss += (1.0 - p) * ((1.0 - p).max(LOGIT_EPS).ln() - (1.0 - q).max(LOGIT_EPS).ln());
    }
    loss
}

/// Cross-entropy restricted to the teacher's class channels, with the
/// constant teacher entropy subtracted so identical probabilities give zero.
struct LogitDistillOp {
    /// Teacher probabilities over the prefix channels, (c_t, h, w).
    p_teacher: Tensor,
    /// Student channel count; only the first c_t channels get gradient.
    student_channels: usize,
}

impl Operation for LogitDistillOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let logits = ctx.input(0);
        if !ctx.needs_grad(logits) {
            return;
        }
        let zs = ctx.value(logits).clone();
        let ct = self.p_teacher.shape()[0];
        let hw = self.p_teacher.len() / ct;
        let n = self.p_teacher.len() as f64;
        let g = grad_out.item() / n;
        let mut grad = Tensor::zeros(zs.shape());
        for c in 0..ct {
            for i in 0..hw {
                let z = zs.data()[c * hw + i];
                let p = self.p_teacher.data()[c * hw + i];
                let q = sigmoid(z);
                // branch-consistent with the clamped logs in the forward pass
                let d_lq = if q >= LOGIT_EPS { 1.0 - q } else { 0.0 };
                let d_l1q = if 1.0 - q >= LOGIT_EPS { -q } else { 0.0 };
                let mut dz = 0.0;
                if p > 0.0 {
                    dz += p * d_lq;
                }
                if p < 1.0 {
                    dz += (1.0 - p) * d_l1q;
                }
                grad.data_mut()[c * hw + i] = -g * dz;
            }
        }
        let _ = self.student_channels;
        ctx.accumulate(logits, grad);
    }
}

/// Distillation on dense classification logits: binary cross-entropy between
/// teacher and student per-pixel class probabilities over the teacher's
/// (old-class) channel prefix, minus the teacher entropy, averaged. Zero
/// exactly when the probabilities agree.
pub fn logit_distill_loss(
    tape: &mut Tape,
    teacher_cls: &[(usize, Tensor)],
    student_cls: &[(usize, VarId)],
    cfg: &DistillConfig,
) -> Result<VarId, DistillError> {
    cfg.validate()?;
    let student_map: BTreeMap<usize, VarId> = student_cls.iter().copied().collect();
    let mut terms = Vec::new();
    for (stride, t) in teacher_cls {
        if !cfg.selects(*stride) {
            continue;
        }
        let s = *student_map
            .get(stride)
            .ok_or(DistillError::LevelMismatch { stride: *stride })?;
        let s_shape = tape.value(s).shape().to_vec();
        let (ct, cs) = (t.shape()[0], s_shape[0]);
        if ct > cs {
            return Err(DistillError::ChannelMismatch {
                teacher: ct,
                student: cs,
            });
        }
        if t.shape()[1..] != s_shape[1..] {
            return Err(DistillError::ShapeMismatch {
                stride: *stride,
                teacher: t.shape().to_vec(),
                student: s_shape,
            });
        }
        let p_teacher = t.map(sigmoid);
        let hw: usize = t.shape()[1..].iter().product();
        let n = (ct * hw) as f64;
        let sum: f64 = (0..ct * hw)
            .map(|i| {
                let z = tape.value(s).data()[i];
                binary_kl(p_teacher.data()[i], z)
            })
            .sum();
        let value = Tensor::scalar(sum / n);
        terms.push(tape.push(
            value,
            vec![s],
            Box::new(LogitDistillOp {
                p_teacher,
                student_channels: cs,
            }),
        ));
    }
    for (stride, _) in student_cls {
        if cfg.selects(*stride) && !teacher_cls.iter().any(|(ts, _)| ts == stride) {
            return Err(DistillError::LevelMismatch { stride: *stride });
        }
    }
    Ok(mean_over_levels(tape, terms))
}

/// total = cls + reg + λ·distill. The distillation term drops out when the
/// variant is none or no teacher exists yet.
pub fn total_loss(
    tape: &mut Tape,
    supervised: (VarId, VarId),
    distill: Option<VarId>,
    cfg: &DistillConfig,
) -> VarId {
    let sum = tape.add(supervised.0, supervised.1);
    match distill {
        Some(d) if cfg.variant != DistillVariant::None => {
            let weighted = tape.scale(d, cfg.weight);
            tape.add(sum, weighted)
        }
        _ => sum,
    }
}
