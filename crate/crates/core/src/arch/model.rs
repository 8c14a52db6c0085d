use std::path::Path;

use crate::arch::config::{ArchKind, ModelConfig, IMAGE_CHANNELS};
use crate::autodiff::{BatchNormState, BatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{self, uniform_init, ParamGroup, ParamId, ParamStore, Parameter};
use crate::rng::{rng_for, stream, Rng};
use crate::tensor::{Real, Tensor};

/// Batch statistics of each batchnorm layer, by layer index, from a train-mode pass.
pub type BnUpdates<T> = Vec<(usize, BatchStats<T>)>;

/// Outputs of one exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitBundle {
    /// 1-based block index.
    pub block_index: usize,
    /// Adapter output resized to the block-1 feature resolution.
    pub adapted_features: Var,
    /// Segmentation logits at input resolution.
    pub seg_logits: Var,
    /// Multi-label classification logits, `B × cls_classes`.
    pub cls_logits: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvLayer {
    pub weight: ParamId,
    /// Absent when a batch normalization follows.
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, size: [usize; 2]) -> [usize; 2] {
        let p = self.padding();
        size.map(|s| crate::autodiff::conv_out_extent(s, self.kernel, self.stride, p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_f: usize,
    pub out_f: usize,
}

/// conv → bn → relu → conv → bn → relu
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub conv1: ConvLayer,
    pub bn1: BnLayer,
    pub conv2: ConvLayer,
    pub bn2: BnLayer,
}

/// conv 3×3 → conv 3×3 → bn
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Adapter {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub bn: BnLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Exit {
    pub adapter: Adapter,
    pub segmenter: Option<ConvLayer>,
    pub classifier: LinearLayer,
}

/// A backbone with per-block exits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamStore<T>,
    pub(crate) bn_states: Vec<BatchNormState<T>>,
    pub(crate) bn_names: Vec<String>,
    pub(crate) encoder: Vec<Block>,
    pub(crate) decoder: Vec<Block>,
    /// One per block; empty once stripped.
    pub(crate) exits: Vec<Exit>,
    pub(crate) final_segmenter: ConvLayer,
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Ordered by block index; empty for a stripped model.
    pub bundles: Vec<ExitBundle>,
    /// Final segmentation logits (the last bundle's `seg_logits`).
    pub final_logits: Var,
    /// Tape handles of every parameter, in registry order.
    pub params: Vec<Var>,
}

struct Builder<'a, T: Real> {
    params: ParamStore<T>,
    bn_states: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    rng: &'a mut Rng,
}

impl<T: Real> Builder<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<ConvLayer> {
        let fan_in = in_c * kernel * kernel;
        let w = uniform_init(&[out_c, in_c, kernel, kernel], fan_in, self.rng);
        let weight = self
            .params
            .register(Parameter::new(format!("{name}.weight"), group, w))?;
        let bias = if bias {
            Some(
                self.params
                    .register(Parameter::new(format!("{name}.bias"), group, Tensor::zeros(&[out_c])))?,
            )
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
        })
    }

    fn bn(&mut self, name: &str, group: ParamGroup, channels: usize) -> Result<BnLayer> {
        let gamma = self.params.register(Parameter::new(
            format!("{name}.gamma"),
            group,
            Tensor::full(&[channels], T::one()),
        ))?;
        let beta = self.params.register(Parameter::new(
            format!("{name}.beta"),
            group,
            Tensor::zeros(&[channels]),
        ))?;
        self.bn_states.push(BatchNormState::new(channels));
        self.bn_names.push(name.to_string());
        Ok(BnLayer {
            gamma,
            beta,
            state: self.bn_states.len() - 1,
            channels,
        })
    }

    fn linear(&mut self, name: &str, group: ParamGroup, in_f: usize, out_f: usize) -> Result<LinearLayer> {
        let w = uniform_init(&[out_f, in_f], in_f, self.rng);
        let weight = self
            .params
            .register(Parameter::new(format!("{name}.weight"), group, w))?;
        let bias = self
            .params
            .register(Parameter::new(format!("{name}.bias"), group, Tensor::zeros(&[out_f])))?;
        Ok(LinearLayer {
            weight,
            bias,
            in_f,
            out_f,
        })
    }

    fn block(&mut self, name: &str, in_c: usize, out_c: usize, stride: usize) -> Result<Block> {
        let g = ParamGroup::Backbone;
        Ok(Block {
            conv1: self.conv(&format!("{name}.conv1"), g, in_c, out_c, 3, stride, false)?,
            bn1: self.bn(&format!("{name}.bn1"), g, out_c)?,
            conv2: self.conv(&format!("{name}.conv2"), g, out_c, out_c, 3, 1, false)?,
            bn2: self.bn(&format!("{name}.bn2"), g, out_c)?,
        })
    }
}

/// Per-block feature channels feeding (adapter, heads).
fn exit_channels(config: &ModelConfig, i: usize) -> (usize, usize) {
    match config.arch {
        ArchKind::Conv => (config.block_channels[i], config.block_channels[i]),
        ArchKind::Ushape => (config.block_channels[i], config.decoder_channels(i)),
    }
}

impl<T: Real> Model<T> {
    /// Deterministic construction from `config` and `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut b = Builder {
            params: ParamStore::new(),
            bn_states: Vec::new(),
            bn_names: Vec::new(),
            rng: &mut rng,
        };
        let n = config.num_blocks;
        let mut encoder = Vec::with_capacity(n);
        let mut in_c = IMAGE_CHANNELS;
        for (i, &c) in config.block_channels.iter().enumerate() {
            encoder.push(b.block(&format!("enc{}", i + 1), in_c, c, 2)?);
            in_c = c;
        }
        let mut decoder = Vec::new();
        if config.arch == ArchKind::Ushape {
            for k in 0..n {
                let out_c = config.decoder_channels(k);
                let in_c = if k == 0 {
                    config.block_channels[n - 1]
                } else {
                    config.decoder_channels(k - 1) + config.block_channels[n - 1 - k]
                };
                decoder.push(b.block(&format!("dec{}", k + 1), in_c, out_c, 1)?);
            }
        }
        let a = config.adapter_dim;
        let mut exits = Vec::with_capacity(n);
        let mut final_segmenter = None;
        for i in 0..n {
            let name = format!("exit{}", i + 1);
            let (feat_c, head_c) = exit_channels(config, i);
            let adapter = Adapter {
                conv1: b.conv(
                    &format!("{name}.adapter.conv1"),
                    ParamGroup::Adapter,
                    feat_c,
                    a,
                    3,
                    1,
                    true,
                )?,
                conv2: b.conv(&format!("{name}.adapter.conv2"), ParamGroup::Adapter, a, a, 3, 1, false)?,
                bn: b.bn(&format!("{name}.adapter.bn"), ParamGroup::Adapter, a)?,
            };
            let last = i + 1 == n;
            let seg_group = if last {
                ParamGroup::FinalHead
            } else {
                ParamGroup::ExitHead
            };
            let seg = b.conv(
                &format!("{name}.seg"),
                seg_group,
                head_c,
                config.seg_classes,
                1,
                1,
                true,
            )?;
            let classifier = b.linear(&format!("{name}.cls"), ParamGroup::ExitHead, head_c, config.cls_classes)?;
            if last {
                final_segmenter = Some(seg);
            }
            exits.push(Exit {
                adapter,
                segmenter: (!last).then_some(seg),
                classifier,
            });
        }
        Ok(Model {
            config: config.clone(),
            params: b.params,
            bn_states: b.bn_states,
            bn_names: b.bn_names,
            encoder,
            decoder,
            exits,
            final_segmenter: final_segmenter.expect("num_blocks >= 2"),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn_states
    }

    pub fn is_stripped(&self) -> bool {
        self.exits.is_empty()
    }

    /// Number of exit bundles a forward pass produces.
    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    /// 1-based encoder blocks whose adapted features feed the feature term.
    pub fn feature_exit_blocks(&self) -> Vec<usize> {
        (1..=self.exits.len()).collect()
    }

    /// Which stage carries the classifier/segmenter heads.
    pub fn head_stage(&self) -> &'static str {
        match self.config.arch {
            ArchKind::Conv => "encoder",
            ArchKind::Ushape => "decoder",
        }
    }

    pub fn num_decoder_blocks(&self) -> usize {
        self.decoder.len()
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|(_, p)| tape.leaf(p.tensor.clone())).collect()
    }

    /// Forward pass; in train mode the running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, images: &Tensor<T>, mode: BnMode) -> Result<ForwardPass> {
        let params = self.bind(tape);
        let x = tape.constant(images.clone());
        let (pass, stats) = self.forward_with(tape, &params, x, mode)?;
        self.apply_batch_stats(&stats);
        Ok(pass)
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (idx, s) in stats {
            self.bn_states[*idx].update(&s.mean, &s.var_unbiased);
        }
    }

    /// Pure forward over already-bound parameters. Train-mode batch statistics
    /// are returned rather than applied.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        images: Var,
        mode: BnMode,
    ) -> Result<(ForwardPass, BnUpdates<T>)> {
        let mut ctx = Ctx {
            model: self,
            tape,
            params,
            mode,
            stats: Vec::new(),
        };
        let (b, c, h, w) = ctx.tape.value(images).dims4("forward")?;
        if c != IMAGE_CHANNELS || [h, w] != self.config.input_size {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected {b}x{IMAGE_CHANNELS}x{}x{} images, got {:?}",
                    self.config.input_size[0],
                    self.config.input_size[1],
                    ctx.tape.shape(images)
                ),
            ));
        }
        let [ih, iw] = self.config.input_size;

        let mut enc_feats = Vec::with_capacity(self.encoder.len());
        let mut x = images;
        for blk in &self.encoder {
            x = ctx.block(blk, x)?;
            enc_feats.push(x);
        }
        let head_feats = match self.config.arch {
            ArchKind::Conv => enc_feats.clone(),
            ArchKind::Ushape => {
                let n = enc_feats.len();
                let mut out = Vec::with_capacity(n);
                let mut y = enc_feats[n - 1];
                for (k, blk) in self.decoder.iter().enumerate() {
                    if k > 0 {
                        let skip = enc_feats[n - 1 - k];
                        let (_, _, sh, sw) = ctx.tape.value(skip).dims4("forward")?;
                        let up = ctx.resize(y, sh, sw)?;
                        y = ctx.tape.concat_channels(&[up, skip])?;
                    }
                    y = ctx.block(blk, y)?;
                    out.push(y);
                }
                out
            }
        };

        let last_feat = *head_feats.last().expect("at least two blocks");
        let final_logits = ctx.segment(&self.final_segmenter, last_feat, ih, iw)?;

        let mut bundles = Vec::with_capacity(self.exits.len());
        if !self.exits.is_empty() {
            let (_, _, h1, w1) = ctx.tape.value(enc_feats[0]).dims4("forward")?;
            for (i, exit) in self.exits.iter().enumerate() {
                let a = &exit.adapter;
                let f = ctx.conv(&a.conv1, enc_feats[i])?;
                let f = ctx.conv(&a.conv2, f)?;
                let f = ctx.bn(&a.bn, f)?;
                let adapted = ctx.resize(f, h1, w1)?;
                let seg_logits = match &exit.segmenter {
                    Some(seg) => ctx.segment(seg, head_feats[i], ih, iw)?,
                    None => final_logits,
                };
                let pooled = ctx.tape.global_avg_pool(head_feats[i])?;
                let cls = &exit.classifier;
                let cls_logits = ctx
                    .tape
                    .linear(pooled, params[cls.weight.0], Some(params[cls.bias.0]))?;
                bundles.push(ExitBundle {
                    block_index: i + 1,
                    adapted_features: adapted,
                    seg_logits,
                    cls_logits,
                });
            }
        }
        let stats = ctx.stats;
        Ok((
            ForwardPass {
                bundles,
                final_logits,
                params: params.to_vec(),
            },
            stats,
        ))
    }

    /// Eval-mode final segmentation logits.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, p)| tape.constant(p.tensor.clone()))
            .collect();
        let x = tape.constant(images.clone());
        let stripped = Model {
            exits: Vec::new(),
            ..self.shallow_view()
        };
        let (pass, _) = stripped.forward_with(&mut tape, &params, x, BnMode::Eval)?;
        Ok(tape.value(pass.final_logits).clone())
    }

    fn shallow_view(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: ParamStore::new(),
            bn_states: self.bn_states.clone(),
            bn_names: Vec::new(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            exits: Vec::new(),
            final_segmenter: self.final_segmenter,
        }
    }

    /// Drops adapters and every head except the final segmenter.
    pub fn strip_exits(&self) -> Model<T> {
        let mut params = ParamStore::new();
        let mut remap = vec![None; self.params.len()];
        for (id, p) in self.params.iter() {
            if p.group.is_main_path() {
                let mut kept = p.clone();
                kept.grad = None;
                remap[id.0] = Some(params.register(kept).expect("names already unique"));
            }
        }
        let r = |id: ParamId| remap[id.0].expect("main-path parameter");
        let conv = |c: &ConvLayer| ConvLayer {
            weight: r(c.weight),
            bias: c.bias.map(r),
            ..*c
        };
        let bn = |b: &BnLayer| BnLayer {
            gamma: r(b.gamma),
            beta: r(b.beta),
            ..*b
        };
        let block = |b: &Block| Block {
            conv1: conv(&b.conv1),
            bn1: bn(&b.bn1),
            conv2: conv(&b.conv2),
            bn2: bn(&b.bn2),
        };
        Model {
            config: self.config.clone(),
            params,
            bn_states: self.bn_states.clone(),
            bn_names: self.bn_names.clone(),
            encoder: self.encoder.iter().map(block).collect(),
            decoder: self.decoder.iter().map(block).collect(),
            exits: Vec::new(),
            final_segmenter: conv(&self.final_segmenter),
        }
    }

    /// Parameters and normalization statistics as named tensors, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
            .collect();
        for (name, st) in self.bn_names.iter().zip(&self.bn_states) {
            let c = st.channels();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(&[c], st.running_mean.clone()).expect("c > 0"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(&[c], st.running_var.clone()).expect("c > 0"),
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_tensors();
        param::write_records_file(path, named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.named_tensors();
        param::encode_records(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Overwrites parameters and running statistics from `SRTN1` records.
    /// Every tensor of this model must be present with a matching shape.
    pub fn load_records(&mut self, records: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let mut by_name: std::collections::HashMap<String, Tensor<f32>> = records.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::ModelConfig(format!("parameter file lacks `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::ModelConfig(format!(
                    "`{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.data().iter().map(|&v| T::from_f64(v as f64)).collect())
        };
        for p in self.params.iter_mut() {
            let data = take(&p.name, p.tensor.shape())?;
            p.tensor.data_mut().copy_from_slice(&data);
            p.velocity.iter_mut().for_each(|v| *v = T::zero());
        }
        for (name, st) in self.bn_names.iter().zip(self.bn_states.iter_mut()) {
            let c = st.channels();
            st.running_mean = take(&format!("{name}.running_mean"), &[c])?;
            st.running_var = take(&format!("{name}.running_var"), &[c])?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::ModelConfig(format!(
                "parameter file has unknown tensor `{extra}`"
            )));
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_records(param::read_records_file(path)?)
    }
}

struct Ctx<'a, 't, T: Real> {
    model: &'a Model<T>,
    tape: &'t mut Tape<T>,
    params: &'a [Var],
    mode: BnMode,
    stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Real> Ctx<'_, '_, T> {
    fn conv(&mut self, c: &ConvLayer, x: Var) -> Result<Var> {
        self.tape.conv2d(
            x,
            self.params[c.weight.0],
            c.bias.map(|b| self.params[b.0]),
            c.stride,
            c.padding(),
        )
    }

    fn bn(&mut self, b: &BnLayer, x: Var) -> Result<Var> {
        let (g, be) = (self.params[b.gamma.0], self.params[b.beta.0]);
        match self.mode {
            BnMode::Train => {
                let (y, s) = self.tape.batchnorm_train(x, g, be)?;
                self.stats.push((b.state, s));
                Ok(y)
            }
            BnMode::Eval => self.tape.batchnorm_eval(x, g, be, &self.model.bn_states[b.state]),
        }
    }

    fn block(&mut self, blk: &Block, x: Var) -> Result<Var> {
        let y = self.conv(&blk.conv1, x)?;
        let y = self.bn(&blk.bn1, y)?;
        let y = self.tape.relu(y);
        let y = self.conv(&blk.conv2, y)?;
        let y = self.bn(&blk.bn2, y)?;
        Ok(self.tape.relu(y))
    }

    /// Bilinear resize, skipped when the size already matches.
    fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.tape.shape(x);
        if s[2] == h && s[3] == w {
            Ok(x)
        } else {
            self.tape.bilinear_upsample(x, h, w)
        }
    }

    fn segment(&mut self, seg: &ConvLayer, feat: Var, h: usize, w: usize) -> Result<Var> {
        let logits = self.conv(seg, feat)?;
        self.resize(logits, h, w)
    }
}
