//! Backbones with per-block exits: a strided conv encoder and a U-shaped
//! encoder/decoder.

mod accounting;
mod config;
mod model;

pub use accounting::{Components, ConvCounts, BN_FLOPS_PER_ELEMENT, RELU_FLOPS_PER_ELEMENT, RESIZE_FLOPS_PER_ELEMENT};
pub use config::{ArchKind, ModelConfig, IMAGE_CHANNELS};
pub use model::{BnUpdates, ExitBundle, ForwardPass, Model};
