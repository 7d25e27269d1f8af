//! Continual object detection workbench.
//!
//! A desk-scale, fully deterministic pipeline for class-incremental object
//! detection: a synthetic ego-centric video benchmark ([`streamgen`]), a toy
//! anchor-free dense detector with a non-local dense classifier ([`detector`]),
//! a capacity-bounded replay buffer with video-wise sampling ([`replay`]),
//! teacher-student feature distillation ([`distill`]), COCO-style averaged-mAP
//! scoring ([`evalkit`]), and an experiment harness ([`harness`]) driving the
//! whole loop from config files.

pub mod autodiff;
pub mod detector;
pub mod distill;
pub mod evalkit;
pub mod harness;
pub mod replay;
pub mod rng;
pub mod streamgen;
pub mod tensor;
