//! Temporal saliency distillation for time-series classification.
//!
//! A small teacher network is trained on a univariate or multivariate
//! time-series archive, its perturbation-based temporal saliency profile is
//! extracted, and a compact student is trained to match both the teacher's
//! softened predictions and the shape of that profile. Everything runs on a
//! self-contained reverse-mode autodiff core, so the whole pipeline is
//! deterministic given a seed.

pub mod data;
pub mod distill;
pub mod experiment;
mod fsutil;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod saliency;
pub mod tensor;
