//! Core algorithms for predicting 3D point semantics from multi-view 2D
//! feature maps observed under noisy camera poses.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`geometry`] — rigid poses, pinhole projection, pose-noise simulation,
//!   bag-of-frames selection and patch extraction.
//! * [`numerics`] — dense `f64` tensors with reverse-mode gradient
//!   accumulation and a finite-difference checking oracle.
//! * [`attention`] — the three hierarchical attention blocks (patch,
//!   instance, inter-point) plus the structural prior and classifier head.
//! * [`baselines`] — deterministic majority voting and the learned ablation
//!   variants used as comparison points.
//! * [`training`] — cross-entropy loss, SGD with a step schedule, mIoU /
//!   average-accuracy metrics and the training loop.
//! * [`datagen`] — seeded synthetic multi-view scenes so the pipeline trains
//!   and evaluates without any external dataset.
//!
//! Everything here is deterministic given explicit seeds and free of IO; the
//! companion CLI crate carries file formats and command-line plumbing.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod baselines;
pub mod datagen;
pub mod geometry;
pub mod numerics;
pub mod rng;
pub mod training;

pub use attention::HiFANetConfig;
pub use baselines::Variant;
pub use datagen::{ObservationTensor, PoseNoise, SceneConfig, SceneDataset};
pub use geometry::{CameraIntrinsics, PixelCoord, Pose, Vec3};
pub use numerics::{ParamStore, Tape, Tensor, Var};
pub use training::{MetricsReport, TrainConfig};
