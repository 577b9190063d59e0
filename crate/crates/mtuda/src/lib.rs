//! Desk-scale laboratory for multi-target unsupervised domain adaptation in
//! semantic segmentation: an fp64 autodiff tensor core, small fully
//! convolutional networks, adversarial and distillation objectives, a
//! procedural multi-domain scene generator, trainers, metrics and
//! entropy-based pseudo-labeling, all bitwise deterministic from one seed.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pseudo_label;
pub mod rng;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
