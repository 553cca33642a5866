//! Augmented hard example mining for generalizable person re-identification.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`imaging`]: the [`Image`] type, PPM I/O, and the augmentation kernels
//!   (crop, flip, rotation, HSV color jitter) with the weak/moderate/strong
//!   policy presets.
//! - [`data`]: multi-domain dataset loading, the union label space, epoch
//!   sampling and the synthetic multi-domain identity generator.
//! - [`model`]: the reference convolutional feature extractor, classifier,
//!   label-smoothed cross-entropy, backpropagation, SGD and the multiply-add
//!   counter.
//! - [`mining`]: hard identity sampling from the exclusion softmax and
//!   selection of the hardest augmented candidate.
//! - [`eval`]: matching scores and single-shot CMC over repeated trials.
//! - [`trainer`]: the two-pass training iteration and the ablation modes.
//!
//! All randomness flows through explicit [`rng::Stream`] arguments derived
//! from a seed, so every run is reproducible bit-for-bit.

pub mod data;
pub mod eval;
pub mod imaging;
pub mod mining;
pub mod model;
pub mod rng;
pub mod trainer;

pub use data::{Corpus, DomainDataset, LabelSpace, SyntheticSpec};
pub use eval::{CmcCurve, EvalProtocol};
pub use imaging::{AugmentationParams, AugmentationPolicy, Image};
pub use model::{ArchSpec, Embedding, Layer, Logits, Matrix, ModelParams};
pub use trainer::{IterationRecord, TrainConfig, TrainMode};
