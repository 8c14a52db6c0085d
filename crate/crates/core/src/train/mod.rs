//! SGD-momentum training with a poly learning-rate schedule, evaluation, and
//! the toggle ablation runner.

mod ablate;
mod metrics;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{BnUpdates, ForwardPass, Model};
use crate::autodiff::{BnMode, Tape};
use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    update_temperature, weighted_objective, LossBreakdown, LossGraph, LossWeights, Temperature, TermCoefficients,
};
use crate::param::Parameter;
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::{Real, Tensor};

pub use crate::losses::Toggles;
pub use ablate::{
    ablate, default_grid, mean_std, AblationResult, AblationRow, AblationSetup, AblationTable, ABLATION_CSV_HEADER,
};
pub use metrics::{argmax_channels, evaluate, ConfusionMatrix, EvalMetrics};

/// Header of the per-step training log.
pub const LOG_CSV_HEADER: &str = "step,lr,tau,sr_cls,sr_seg,sr_f,sr_l,total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub poly_power: f64,
    pub weights: LossWeights,
    pub temperature: Temperature,
    pub seed: u64,
    pub toggles: Toggles,
    /// Evaluate on the held-out split every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Apply random flip/rotation/scale/brightness to training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 40,
            poly_power: 0.9,
            weights: LossWeights::default(),
            temperature: Temperature::default(),
            seed: 0,
            toggles: Toggles::FULL,
            eval_every: 0,
            augment: true,
        }
    }
}

fn nested(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { path, msg } => Error::Config {
            path: format!("{prefix}.{path}"),
            msg,
        },
        other => other,
    })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", format!("must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                format!("batch normalization needs at least 2, got {}", self.batch_size),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(Error::config("poly_power", "must be > 0"));
        }
        nested("weights", self.weights.validate())?;
        nested("temperature", self.temperature.validate())
    }

    /// Optimizer steps per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples / self.batch_size
    }
}

/// `lr0 · (1 − iter/iter_max)^power`.
pub fn poly_lr(iter: usize, iter_max: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter_max == 0 {
        return Err(Error::invalid("poly_lr", "iter_max must be at least 1"));
    }
    if iter > iter_max {
        return Err(Error::invalid(
            "poly_lr",
            format!("iter {iter} exceeds iter_max {iter_max}"),
        ));
    }
    Ok(lr0 * (1.0 - iter as f64 / iter_max as f64).powf(power))
}

/// `v ← m·v + (g + wd·p); p ← p − lr·v`, then clears the gradients.
/// Every parameter passed must carry a gradient.
pub fn sgd_momentum_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let params: Vec<&mut Parameter<T>> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let (lr, m, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for p in params {
        let g = p.grad.take().expect("checked above");
        for ((w, v), &gi) in p.tensor.data_mut().iter_mut().zip(p.velocity.iter_mut()).zip(g.data()) {
            *v = m * *v + (gi + wd * *w);
            *w = *w - lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Option<EvalMetrics>,
    pub wall_clock_secs: f64,
}

impl RunLog {
    /// Per-step CSV with the fixed header.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.steps.len() + 1));
        out.push_str(LOG_CSV_HEADER);
        out.push('\n');
        for r in &self.steps {
            let l = &r.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step, r.lr, r.tau, l.sr_cls, l.sr_seg, l.sr_f, l.sr_l, l.total
            );
        }
        out
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.lr).collect()
    }

    pub fn tau_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.tau).collect()
    }
}

/// A minibatch in tensor form.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub images: Tensor<T>,
    /// Class per pixel, `B·H·W`.
    pub mask: Vec<usize>,
    /// Multi-label targets, `B·C_fg`.
    pub labels: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("batch", "no samples"))?;
        let (h, w) = (first.height, first.width);
        let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut mask = Vec::with_capacity(samples.len() * h * w);
        let mut labels = Vec::new();
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(Error::shape("batch", "samples differ in size"));
            }
            images.extend(s.image.iter().map(|&v| T::from_f64(v as f64)));
            mask.extend(s.mask.iter().map(|&m| m as usize));
            labels.extend(s.labels.iter().map(|&l| T::from_f64(l as f64)));
        }
        Ok(Batch {
            images: Tensor::new(&[samples.len(), 3, h, w], images)?,
            mask,
            labels,
        })
    }
}

/// Builds the step's objective on a fresh tape. Returns the tape, the loss
/// graph, the forward pass and the batchnorm statistics.
fn step_graph<T: Real>(
    model: &Model<T>,
    batch: &Batch<T>,
    coef: &TermCoefficients,
    tau: f64,
) -> Result<(Tape<T>, LossGraph, ForwardPass, BnUpdates<T>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let (pass, stats) = model.forward_with(&mut tape, &params, x, BnMode::Train)?;
    let graph = weighted_objective(&mut tape, &pass.bundles, &batch.mask, &batch.labels, coef, tau)?;
    Ok((tape, graph, pass, stats))
}

/// Loss breakdown of one train-mode forward pass, without updating anything.
pub fn batch_objective<T: Real>(
    model: &Model<T>,
    batch: &Batch<T>,
    coef: &TermCoefficients,
    tau: f64,
) -> Result<LossBreakdown> {
    Ok(step_graph(model, batch, coef, tau)?.1.breakdown)
}

/// Sample order of `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
    order
}

/// The `step`-th training batch, exactly as [`train`] builds it.
pub fn training_batch<T: Real>(
    data: &[Sample],
    cfg: &TrainConfig,
    epoch: usize,
    step_in_epoch: usize,
) -> Result<Batch<T>> {
    let order = epoch_order(cfg.seed, epoch, data.len());
    let idx = &order[step_in_epoch * cfg.batch_size..(step_in_epoch + 1) * cfg.batch_size];
    let augmented: Vec<Sample>;
    let picked: Vec<&Sample> = if cfg.augment {
        augmented = idx
            .iter()
            .map(|&i| {
                augment(
                    &data[i],
                    derive_seed(cfg.seed, &[stream::AUGMENT, epoch as u64, i as u64]),
                )
            })
            .collect();
        augmented.iter().collect()
    } else {
        idx.iter().map(|&i| &data[i]).collect()
    };
    Batch::from_samples(&picked)
}

/// Trains with the terms selected by `cfg.toggles`.
pub fn train(
    model: Model<f32>,
    data: &[Sample],
    eval: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, RunLog)> {
    let coef = TermCoefficients::for_toggles(&cfg.weights, cfg.toggles);
    train_with_coefficients(model, data, eval, cfg, &coef)
}

/// Training loop with explicit term coefficients; `cfg.toggles` is ignored.
pub fn train_with_coefficients<T: Real>(
    mut model: Model<T>,
    data: &[Sample],
    eval: Option<&[Sample]>,
    cfg: &TrainConfig,
    coef: &TermCoefficients,
) -> Result<(Model<T>, RunLog)> {
    cfg.validate()?;
    if model.is_stripped() {
        return Err(Error::invalid("train", "model has no exits"));
    }
    if data.len() < cfg.batch_size {
        return Err(Error::invalid(
            "train",
            format!("{} samples cannot fill a batch of {}", data.len(), cfg.batch_size),
        ));
    }
    let start = Instant::now();
    let per_epoch = cfg.steps_per_epoch(data.len());
    let total_steps = per_epoch * cfg.epochs;
    if total_steps < 2 {
        return Err(Error::invalid("train", "schedule needs at least 2 optimizer steps"));
    }
    // the last step runs at iter = iter_max, so the schedule reaches 0
    let iter_max = total_steps - 1;
    let mut temp = cfg.temperature;
    let mut log = RunLog {
        steps: Vec::with_capacity(total_steps),
        epochs: Vec::new(),
        final_metrics: None,
        wall_clock_secs: 0.0,
    };
    let mut last_finite = LossBreakdown::default();
    for epoch in 0..cfg.epochs {
        for s in 0..per_epoch {
            let step = epoch * per_epoch + s;
            let lr = poly_lr(step, iter_max, cfg.lr0, cfg.poly_power)?;
            let batch = training_batch::<T>(data, cfg, epoch, s)?;
            let (mut tape, graph, pass, stats) = step_graph(&model, &batch, coef, temp.tau)?;
            if !graph.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    last_finite: format!("{last_finite:?}"),
                });
            }
            tape.backward(graph.total)?;
            let next_temp = update_temperature(temp, &tape, &pass.bundles);
            model.apply_batch_stats(&stats);
            for (var, p) in pass.params.iter().zip(model.params_mut().iter_mut()) {
                p.grad = tape.grad(*var).cloned();
            }
            sgd_momentum_step(
                model.params_mut().iter_mut().filter(|p| p.grad.is_some()),
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            log.steps.push(StepRecord {
                step,
                lr,
                tau: temp.tau,
                loss: graph.breakdown.clone(),
            });
            last_finite = graph.breakdown;
            temp = next_temp;
        }
        if let Some(ev) = eval {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                let m = evaluate(&model, ev, cfg.batch_size)?;
                log.epochs.push(EpochRecord {
                    epoch: epoch + 1,
                    miou: m.miou,
                    pixel_accuracy: m.pixel_accuracy,
                });
            }
        }
    }
    if let Some(ev) = eval {
        log.final_metrics = Some(evaluate(&model, ev, cfg.batch_size)?);
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, log))
}
