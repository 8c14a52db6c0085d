use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// Plain encoder of strided blocks; every block carries a full exit.
    Conv,
    /// Encoder/decoder with skip connections; feature exits sit on encoder
    /// blocks, head exits on decoder blocks.
    Ushape,
}

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub num_blocks: usize,
    pub block_channels: Vec<usize>,
    /// Adapter output width; 16 unless set.
    #[serde(default = "default_adapter_dim")]
    pub adapter_dim: usize,
    /// Including background; 4 unless set.
    #[serde(default = "default_seg_classes")]
    pub seg_classes: usize,
    /// Foreground classes; 3 unless set.
    #[serde(default = "default_cls_classes")]
    pub cls_classes: usize,
    /// `[H, W]`; 64×64 unless set.
    #[serde(default = "default_input_size")]
    pub input_size: [usize; 2],
}

fn default_adapter_dim() -> usize {
    16
}

fn default_seg_classes() -> usize {
    4
}

fn default_cls_classes() -> usize {
    3
}

fn default_input_size() -> [usize; 2] {
    [64, 64]
}

impl Default for ModelConfig {
    /// The shipped toy configuration used by the ablation runs.
    fn default() -> Self {
        ModelConfig {
            arch: ArchKind::Ushape,
            num_blocks: 3,
            block_channels: vec![8, 16, 32],
            adapter_dim: 4,
            seg_classes: 4,
            cls_classes: 3,
            input_size: [64, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.num_blocks < 2 {
            return fail(
                "num_blocks",
                format!(
                    "num_blocks must be at least 2 (a teacher and a student), got {}",
                    self.num_blocks
                ),
            );
        }
        if self.block_channels.len() != self.num_blocks {
            return fail(
                "block_channels",
                format!(
                    "block_channels has {} entries for {} blocks",
                    self.block_channels.len(),
                    self.num_blocks
                ),
            );
        }
        if self.block_channels.contains(&0) {
            return fail("block_channels", "channel counts must be positive".into());
        }
        if self.adapter_dim == 0 {
            return fail("adapter_dim", "must be positive".into());
        }
        if self.cls_classes == 0 || self.seg_classes != self.cls_classes + 1 {
            return fail(
                "seg_classes",
                format!(
                    "seg_classes ({}) must equal cls_classes ({}) + 1",
                    self.seg_classes, self.cls_classes
                ),
            );
        }
        if self.input_size.contains(&0) {
            return fail("input_size", "extents must be positive".into());
        }
        Ok(())
    }

    /// Spatial size after encoder block `i` (0-based): each block halves.
    pub fn block_size(&self, i: usize) -> [usize; 2] {
        let mut s = self.input_size;
        for _ in 0..=i {
            s = [s[0].div_ceil(2), s[1].div_ceil(2)];
        }
        s
    }

    /// Output channels of decoder block `k` (0-based): mirrors the encoder.
    pub fn decoder_channels(&self, k: usize) -> usize {
        self.block_channels[self.num_blocks - 1 - k]
    }
}
