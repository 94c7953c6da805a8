//! Selection-free self-training for landmark detection, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`domain`]: landmark sets, samples, dataset splits and the pseudo-label store.
//! - [`synth`]: synthetic landmark tasks with known ground truth.
//! - [`codec`]: Gaussian heatmap encoding and quarter-offset decoding.
//! - [`losses`]: `Lp` and heatmap losses plus the granularity curriculum.
//! - [`tinynet`]: small MLP detectors with handwritten backprop and Adam.
//! - [`selftrain`]: the two-stage self-training engine and its baselines.
//! - [`metrics`]: NME/AUC/FR/MRE and the diagnostic analyses.
//! - [`io`]: on-disk dataset and checkpoint formats.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the training
//! engine runs in `f64`, exposed through the aliases below.

pub mod codec;
pub mod domain;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod scalar;
pub mod selftrain;
pub mod synth;
pub mod tinynet;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision of the training engine.
pub type Real = f64;

pub type Landmarks = domain::LandmarkSet<Real>;
pub type Heatmaps = codec::HeatmapStack<Real>;
pub type Model = tinynet::TinyModel<Real>;
pub type Adam = tinynet::AdamState<Real>;
pub type Gradients = tinynet::Gradients<Real>;

/// Single-precision variants, handy for quick sweeps of the numeric kernels.
pub type Landmarks32 = domain::LandmarkSet<f32>;
pub type Heatmaps32 = codec::HeatmapStack<f32>;
pub type Model32 = tinynet::TinyModel<f32>;
