//! Multi-exit semantic segmentation with bidirectional layer-wise
//! self-distillation, built on a small reverse-mode autodiff core.
//!
//! Every block of the backbone gets an exit: a classifier/segmenter pair
//! supervised by ground truth, plus an adapter that projects its features to a
//! shared width. Two distillation terms couple the exits: the first block's
//! adapted features teach every deeper block (feature term), and the deepest
//! block's classification logits teach every shallower block (logit term).
//! Exits are side branches only and are stripped for inference.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod param;
pub mod report;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod train;

pub use arch::{ArchKind, ExitBundle, Model, ModelConfig};
pub use autodiff::{BnMode, Tape, Var};
pub use config::RunConfigFile;
pub use data::{DatasetConfig, Sample, ShapeClass};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights, Temperature};
pub use tensor::{Precision, Real, Tensor};
pub use train::{ConfusionMatrix, RunLog, Toggles, TrainConfig};
