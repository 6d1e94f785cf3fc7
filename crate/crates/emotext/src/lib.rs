//! Multi-label sentiment classification for short texts.
//!
//! The pipeline has three optimization strategies around a small
//! from-scratch transformer encoder: continued masked-language-model
//! pre-training on domain text, generative data augmentation with
//! ratio-controlled mixing, and interchangeable classification heads
//! (stacked fully-connected layers or projected attention). Evaluation
//! covers subset accuracy, micro/macro/samples F1, per-label confusion
//! matrices and Cohen's kappa agreement; predictions can be explained with
//! exact or sampled Shapley token attributions.
//!
//! Everything is deterministic given a seed and runs on a single CPU at
//! desk scale; see the `emotext` binary for the command-line surface.

pub mod augment;
pub mod data;
pub mod encoder;
pub mod explain;
pub mod metrics;
pub mod training;
pub mod model;
pub mod fixtures;
pub mod heads;
pub mod tensor;

pub use data::{Dataset, Example, LabelSet, Vocabulary};
pub use tensor::{NamedTensors, Tensor};
pub fn run_cli() -> i32 { 0 }
