//! Parameter and FLOP accounting per component.
//!
//! FLOPs are per image: convolutions and linear layers cost two per
//! multiply-accumulate plus one per bias add (convolutions feeding a batch
//! normalization have no bias); batch normalization two per
//! element, ReLU and pooling one per element, bilinear resizing nine per output
//! element (the 6 multiplies and 3 adds of the two-axis blend).

use serde::Serialize;

use super::config::{ArchKind, IMAGE_CHANNELS};
use super::model::{Block, ConvLayer, LinearLayer, Model};
use crate::losses::Toggles;
use crate::param::ParamGroup;
use crate::tensor::Real;

pub const BN_FLOPS_PER_ELEMENT: u64 = 2;
pub const RELU_FLOPS_PER_ELEMENT: u64 = 1;
pub const RESIZE_FLOPS_PER_ELEMENT: u64 = 9;

/// Totals split by the part of the network they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Components {
    pub backbone: u64,
    pub final_head: u64,
    /// Non-final segmenters and all classifiers (multi-exit supervision).
    pub exit_heads: u64,
    /// Feature adapters (feature distillation only).
    pub adapters: u64,
}

impl Components {
    pub fn main_path(&self) -> u64 {
        self.backbone + self.final_head
    }

    pub fn exits(&self) -> u64 {
        self.exit_heads + self.adapters
    }

    pub fn total(&self) -> u64 {
        self.main_path() + self.exits()
    }

    fn slot(&mut self, g: ParamGroup) -> &mut u64 {
        match g {
            ParamGroup::Backbone => &mut self.backbone,
            ParamGroup::FinalHead => &mut self.final_head,
            ParamGroup::ExitHead => &mut self.exit_heads,
            ParamGroup::Adapter => &mut self.adapters,
        }
    }

    /// Cost of the training graph under `toggles`. The logit term reuses the
    /// classifiers, so it adds nothing once multi-exit supervision is on.
    pub fn for_toggles(&self, toggles: Toggles) -> u64 {
        let mut total = self.main_path();
        if toggles.mea || toggles.sr_l {
            total += self.exit_heads;
        }
        if toggles.sr_f {
            total += self.adapters;
        }
        total
    }
}

/// Conv counts in the training graph, split like [`Components`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConvCounts {
    pub main_path: usize,
    pub exit_heads: usize,
    pub adapters: usize,
}

impl ConvCounts {
    pub fn for_toggles(&self, toggles: Toggles) -> usize {
        let mut n = self.main_path;
        if toggles.mea || toggles.sr_l {
            n += self.exit_heads;
        }
        if toggles.sr_f {
            n += self.adapters;
        }
        n
    }
}

fn conv_flops(c: &ConvLayer, out: [usize; 2]) -> u64 {
    let area = (out[0] * out[1]) as u64;
    let macs = (c.in_c * c.kernel * c.kernel * c.out_c) as u64 * area;
    let bias = if c.bias.is_some() { c.out_c as u64 * area } else { 0 };
    2 * macs + bias
}

fn linear_flops(l: &LinearLayer) -> u64 {
    (2 * l.in_f * l.out_f + l.out_f) as u64
}

fn resize_flops(c: usize, from: [usize; 2], to: [usize; 2]) -> u64 {
    if from == to {
        0
    } else {
        RESIZE_FLOPS_PER_ELEMENT * (c * to[0] * to[1]) as u64
    }
}

fn block_flops(b: &Block, input: [usize; 2]) -> (u64, [usize; 2]) {
    let s1 = b.conv1.out_size(input);
    let e1 = (b.conv1.out_c * s1[0] * s1[1]) as u64;
    let s2 = b.conv2.out_size(s1);
    let e2 = (b.conv2.out_c * s2[0] * s2[1]) as u64;
    let f = conv_flops(&b.conv1, s1)
        + (BN_FLOPS_PER_ELEMENT + RELU_FLOPS_PER_ELEMENT) * e1
        + conv_flops(&b.conv2, s2)
        + (BN_FLOPS_PER_ELEMENT + RELU_FLOPS_PER_ELEMENT) * e2;
    (f, s2)
}

impl<T: Real> Model<T> {
    pub fn param_components(&self) -> Components {
        let mut c = Components::default();
        for (_, p) in self.params.iter() {
            *c.slot(p.group) += p.numel() as u64;
        }
        c
    }

    /// Scalar parameter count; without exits only the backbone and the final
    /// segmenter are counted.
    pub fn count_params(&self, include_exits: bool) -> usize {
        let c = self.param_components();
        (if include_exits { c.total() } else { c.main_path() }) as usize
    }

    pub fn flop_components(&self) -> Components {
        let cfg = &self.config;
        let mut c = Components::default();
        let mut size = cfg.input_size;
        let mut enc_sizes = Vec::new();
        for b in &self.encoder {
            let (f, s) = block_flops(b, size);
            c.backbone += f;
            enc_sizes.push(s);
            size = s;
        }
        let head_sizes = match cfg.arch {
            ArchKind::Conv => enc_sizes.clone(),
            ArchKind::Ushape => {
                let n = enc_sizes.len();
                let mut out = Vec::new();
                for (k, b) in self.decoder.iter().enumerate() {
                    if k > 0 {
                        let target = enc_sizes[n - 1 - k];
                        c.backbone += resize_flops(self.decoder[k - 1].conv2.out_c, size, target);
                        size = target;
                    }
                    let (f, s) = block_flops(b, size);
                    c.backbone += f;
                    out.push(s);
                    size = s;
                }
                out
            }
        };
        let input = cfg.input_size;
        let fs = self.final_segmenter;
        let last = *head_sizes.last().expect("blocks");
        c.final_head += conv_flops(&fs, last) + resize_flops(fs.out_c, last, input);

        for (i, exit) in self.exits.iter().enumerate() {
            let a = &exit.adapter;
            let s1 = a.conv1.out_size(enc_sizes[i]);
            let s2 = a.conv2.out_size(s1);
            c.adapters += conv_flops(&a.conv1, s1)
                + conv_flops(&a.conv2, s2)
                + BN_FLOPS_PER_ELEMENT * (a.bn.channels * s2[0] * s2[1]) as u64
                + resize_flops(a.bn.channels, s2, enc_sizes[0]);
            if let Some(seg) = &exit.segmenter {
                c.exit_heads += conv_flops(seg, head_sizes[i]) + resize_flops(seg.out_c, head_sizes[i], input);
            }
            let cl = &exit.classifier;
            c.exit_heads += (cl.in_f * head_sizes[i][0] * head_sizes[i][1]) as u64 + linear_flops(cl);
        }
        debug_assert_eq!(self.encoder[0].conv1.in_c, IMAGE_CHANNELS);
        c
    }

    pub fn estimate_flops(&self, include_exits: bool) -> u64 {
        let c = self.flop_components();
        if include_exits {
            c.total()
        } else {
            c.main_path()
        }
    }

    pub fn conv_counts(&self) -> ConvCounts {
        let blocks = 2 * (self.encoder.len() + self.decoder.len());
        ConvCounts {
            main_path: blocks + 1,
            exit_heads: self.exits.iter().filter(|e| e.segmenter.is_some()).count(),
            adapters: 2 * self.exits.len(),
        }
    }
}
