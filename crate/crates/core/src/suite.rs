//! Finite-difference gradient suite: every differentiable operation on random
//! shapes, a conv→bn→relu→softmax→cross-entropy chain, and the full training
//! objective on a two-block model.
//!
//! Each op is checked through `Σ r ⊙ op(x)` with a fixed random weight `r`,
//! so every output element contributes a distinct gradient. ReLU inputs are
//! kept away from the kink and `log` inputs away from zero.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::{ArchKind, Model, ModelConfig};
use crate::autodiff::{BatchNormState, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::losses::{cls_bce_loss, feature_distill_ce, logit_distill_ce, seg_ce_loss, LossWeights};
use crate::rng::{rng_for, Rng};
use crate::tensor::{Precision, Real, Tensor};

/// Names accepted by [`run_suite`], in run order.
pub const OPS: &[&str] = &[
    "conv2d",
    "bilinear_upsample",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "linear",
    "global_avg_pool",
    "add",
    "mul",
    "scale",
    "log",
    "sum",
    "mean",
    "channel_softmax",
    "channel_log_softmax",
    "concat_channels",
    "nll",
    "bce_with_logits",
    "feature_distill_ce",
    "logit_distill_ce",
    "composite_chain",
    "training_objective",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteSettings {
    pub eps: f64,
    pub tolerance: f64,
    /// Random shapes drawn per op (the model objective runs once).
    pub cases: usize,
    pub seed: u64,
}

impl SuiteSettings {
    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::F64 => SuiteSettings {
                eps: 1e-5,
                tolerance: 1e-4,
                cases: 20,
                seed: 0,
            },
            // Single precision cannot resolve deep chains; results are
            // informational and the tolerance only flags gross errors.
            Precision::F32 => SuiteSettings {
                eps: 1e-2,
                tolerance: 5e-2,
                cases: 20,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub cases: usize,
    pub report: GradCheckReport,
    pub passed: bool,
}

type Objective<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

struct Case<T> {
    inputs: Vec<Tensor<T>>,
    f: Objective<T>,
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Magnitudes in [0.1, 1] with random signs.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ r ⊙ out`
fn weighted<T: Real>(tape: &mut Tape<T>, out: Var, r: &Tensor<T>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(out, rv)?;
    Ok(tape.sum(p))
}

fn cast_all<T: Real>(ts: Vec<Tensor<f64>>) -> Vec<Tensor<T>> {
    ts.iter().map(|t| t.cast()).collect()
}

/// Builds a case whose objective is `Σ r ⊙ g(inputs)` for an output of `out_shape`.
fn weighted_case<T: Real + 'static>(
    weight_seed: u64,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    g: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var> + 'static,
) -> Case<T> {
    let r: Tensor<T> = normal(&mut rng_for(weight_seed, &[]), out_shape).cast();
    Case {
        inputs: cast_all(inputs),
        f: Box::new(move |t, v| {
            let out = g(t, v)?;
            weighted(t, out, &r)
        }),
    }
}

fn dims(rng: &mut Rng, b: (usize, usize), c: (usize, usize), hw: (usize, usize)) -> [usize; 4] {
    [
        rng.random_range(b.0..=b.1),
        rng.random_range(c.0..=c.1),
        rng.random_range(hw.0..=hw.1),
        rng.random_range(hw.0..=hw.1),
    ]
}

fn op_case<T: Real + 'static>(op: &str, rng: &mut Rng) -> Result<Case<T>> {
    let case = match op {
        "conv2d" => {
            let [b, c, _, _] = dims(rng, (1, 2), (1, 3), (1, 1));
            let o = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2);
            let h = rng.random_range(k..=6);
            let w = rng.random_range(k..=6);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let inputs = vec![
                normal(rng, &[b, c, h, w]),
                normal(rng, &[o, c, k, k]),
                normal(rng, &[o]),
            ];
            weighted_case(rng.random(), inputs, &[b, o, oh, ow], move |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
            })
        }
        "bilinear_upsample" => {
            let s = dims(rng, (1, 2), (1, 2), (1, 5));
            let oh = rng.random_range(1..=9);
            let ow = rng.random_range(1..=9);
            weighted_case(
                rng.random(),
                vec![normal(rng, &s)],
                &[s[0], s[1], oh, ow],
                move |t, v| t.bilinear_upsample(v[0], oh, ow),
            )
        }
        "batchnorm_train" => {
            let s = dims(rng, (2, 3), (1, 3), (2, 4));
            let inputs = vec![normal(rng, &s), uniform(rng, &[s[1]], 0.5, 1.5), normal(rng, &[s[1]])];
            weighted_case(rng.random(), inputs, &s, |t, v| {
                Ok(t.batchnorm_train(v[0], v[1], v[2])?.0)
            })
        }
        "batchnorm_eval" => {
            let s = dims(rng, (1, 2), (1, 3), (1, 4));
            let state = BatchNormState {
                running_mean: cast_all::<T>(vec![normal(rng, &[s[1]])]).remove(0).into_data(),
                running_var: cast_all::<T>(vec![uniform(rng, &[s[1]], 0.5, 2.0)])
                    .remove(0)
                    .into_data(),
            };
            let inputs = vec![normal(rng, &s), normal(rng, &[s[1]]), normal(rng, &[s[1]])];
            weighted_case(rng.random(), inputs, &s, move |t, v| {
                t.batchnorm_eval(v[0], v[1], v[2], &state)
            })
        }
        "relu" => {
            let s = dims(rng, (1, 2), (1, 3), (1, 4));
            weighted_case(rng.random(), vec![off_zero(rng, &s)], &s, |t, v| Ok(t.relu(v[0])))
        }
        "linear" => {
            let (b, i, o) = (
                rng.random_range(1..=3),
                rng.random_range(1..=5),
                rng.random_range(1..=4),
            );
            let inputs = vec![normal(rng, &[b, i]), normal(rng, &[o, i]), normal(rng, &[o])];
            weighted_case(rng.random(), inputs, &[b, o], |t, v| t.linear(v[0], v[1], Some(v[2])))
        }
        "global_avg_pool" => {
            let s = dims(rng, (1, 2), (1, 3), (1, 4));
            weighted_case(rng.random(), vec![normal(rng, &s)], &[s[0], s[1]], |t, v| {
                t.global_avg_pool(v[0])
            })
        }
        "add" | "mul" => {
            let s = dims(rng, (1, 2), (1, 3), (1, 4));
            let inputs = vec![normal(rng, &s), normal(rng, &s)];
            if op == "add" {
                weighted_case(rng.random(), inputs, &s, |t, v| t.add(v[0], v[1]))
            } else {
                weighted_case(rng.random(), inputs, &s, |t, v| t.mul(v[0], v[1]))
            }
        }
        "scale" => {
            let s = dims(rng, (1, 2), (1, 3), (1, 4));
            let k = T::from_f64(rng.random_range(-2.0..2.0));
            weighted_case(
                rng.random(),
                vec![normal(rng, &s)],
                &s,
                move |t, v| Ok(t.scale(v[0], k)),
            )
        }
        "log" => {
            let s = dims(rng, (1, 2), (1, 3), (1, 4));
            weighted_case(rng.random(), vec![uniform(rng, &s, 0.5, 2.0)], &s, |t, v| {
                Ok(t.log(v[0]))
            })
        }
        "sum" | "mean" => {
            let s = dims(rng, (1, 2), (1, 3), (1, 4));
            if op == "sum" {
                weighted_case(rng.random(), vec![normal(rng, &s)], &[], |t, v| Ok(t.sum(v[0])))
            } else {
                weighted_case(rng.random(), vec![normal(rng, &s)], &[], |t, v| Ok(t.mean(v[0])))
            }
        }
        "channel_softmax" | "channel_log_softmax" => {
            let s = dims(rng, (1, 2), (2, 4), (1, 3));
            if op == "channel_softmax" {
                weighted_case(rng.random(), vec![normal(rng, &s)], &s, |t, v| t.channel_softmax(v[0]))
            } else {
                weighted_case(rng.random(), vec![normal(rng, &s)], &s, |t, v| {
                    t.channel_log_softmax(v[0])
                })
            }
        }
        "concat_channels" => {
            let s = dims(rng, (1, 2), (1, 2), (1, 3));
            let parts = rng.random_range(2..=3);
            let chans: Vec<usize> = (0..parts).map(|_| rng.random_range(1..=3)).collect();
            let inputs = chans.iter().map(|&c| normal(rng, &[s[0], c, s[2], s[3]])).collect();
            let total = chans.iter().sum();
            weighted_case(rng.random(), inputs, &[s[0], total, s[2], s[3]], |t, v| {
                t.concat_channels(v)
            })
        }
        "nll" => {
            let s = dims(rng, (1, 2), (2, 4), (1, 3));
            let targets: Vec<usize> = (0..s[0] * s[2] * s[3]).map(|_| rng.random_range(0..s[1])).collect();
            let logp = normal(rng, &s);
            Case {
                inputs: cast_all(vec![logp]),
                f: Box::new(move |t, v| {
                    let l = t.channel_log_softmax(v[0])?;
                    t.nll(l, &targets)
                }),
            }
        }
        "bce_with_logits" => {
            let (b, c) = (rng.random_range(1..=3), rng.random_range(1..=4));
            let labels: Vec<T> = (0..b * c).map(|_| T::from_f64(rng.random_range(0..2) as f64)).collect();
            Case {
                inputs: cast_all(vec![normal(rng, &[b, c])]),
                f: Box::new(move |t, v| t.bce_with_logits(v[0], &labels)),
            }
        }
        "feature_distill_ce" | "logit_distill_ce" => {
            let shape: Vec<usize> = if op == "feature_distill_ce" {
                dims(rng, (1, 2), (2, 4), (1, 3)).to_vec()
            } else {
                vec![rng.random_range(1..=3), rng.random_range(2..=4)]
            };
            let tau = rng.random_range(1.0..3.0);
            let feature = op == "feature_distill_ce";
            // the teacher is a stop-gradient target, so only the student is probed
            let teacher: Tensor<T> = normal(rng, &shape).cast();
            Case {
                inputs: cast_all(vec![normal(rng, &shape)]),
                f: Box::new(move |t, v| {
                    let tv = t.leaf(teacher.clone());
                    if feature {
                        feature_distill_ce(t, tv, v[0], tau)
                    } else {
                        logit_distill_ce(t, tv, v[0], tau)
                    }
                }),
            }
        }
        "composite_chain" => composite_case(rng),
        other => return Err(unknown_op(other)),
    };
    Ok(case)
}

/// conv (no bias) → batchnorm → relu → log-softmax → nll
fn composite_case<T: Real + 'static>(rng: &mut Rng) -> Case<T> {
    let (b, c, o) = (2, rng.random_range(1..=3), rng.random_range(2..=4));
    let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
    let targets: Vec<usize> = (0..b * h * w).map(|_| rng.random_range(0..o)).collect();
    let inputs = vec![
        normal(rng, &[b, c, h, w]),
        normal(rng, &[o, c, 3, 3]),
        uniform(rng, &[o], 0.5, 1.5),
        normal(rng, &[o]),
    ];
    Case {
        inputs: cast_all(inputs),
        f: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 1)?;
            let (y, _) = t.batchnorm_train(y, v[2], v[3])?;
            let y = t.relu(y);
            let y = t.channel_log_softmax(y)?;
            t.nll(y, &targets)
        }),
    }
}

/// Two-block strided model used by the objective check.
pub fn objective_model_config() -> ModelConfig {
    ModelConfig {
        arch: ArchKind::Conv,
        num_blocks: 2,
        block_channels: vec![3, 4],
        adapter_dim: 3,
        seg_classes: 4,
        cls_classes: 3,
        input_size: [8, 8],
    }
}

/// The full objective `λ₁·L_cls + λ₂·L_seg + λ₃·L_F + L_L` with all model
/// parameters as inputs. Finite differences cannot see a stop-gradient, so
/// the two teachers are frozen at their values for the unperturbed
/// parameters; at that point this graph and the training graph agree in
/// value and gradient.
fn objective_case<T: Real + 'static>(rng: &mut Rng, seed: u64) -> Result<Case<T>> {
    let cfg = objective_model_config();
    let model = Model::<T>::build(&cfg, seed)?;
    let b = 2;
    let [h, w] = cfg.input_size;
    let images: Tensor<T> = uniform(rng, &[b, 3, h, w], 0.0, 1.0).cast();
    let mask: Vec<usize> = (0..b * h * w).map(|_| rng.random_range(0..cfg.seg_classes)).collect();
    let labels: Vec<T> = (0..b * cfg.cls_classes)
        .map(|_| T::from_f64(rng.random_range(0..2) as f64))
        .collect();
    let tau = 2.0;
    let weights = LossWeights::default();

    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = tape.constant(images.clone());
    let (pass, _) = model.forward_with(&mut tape, &params, x, BnMode::Train)?;
    let n = pass.bundles.len();
    let feature_teacher = tape.value(pass.bundles[0].adapted_features).clone();
    let logit_teacher = tape.value(pass.bundles[n - 1].cls_logits).clone();
    let inputs = params.iter().map(|&p| tape.value(p).clone()).collect();
    drop(tape);

    Ok(Case {
        inputs,
        f: Box::new(move |t, v| {
            let x = t.constant(images.clone());
            let (pass, _) = model.forward_with(t, v, x, BnMode::Train)?;
            let bundles = &pass.bundles;
            let k = bundles.len();
            let inv = T::from_f64(1.0 / k as f64);
            let mut cls = Vec::new();
            let mut seg = Vec::new();
            for bd in bundles {
                cls.push(cls_bce_loss(t, bd.cls_logits, &labels)?);
                seg.push(seg_ce_loss(t, bd.seg_logits, &mask)?);
            }
            let ft = t.constant(feature_teacher.clone());
            let lt = t.constant(logit_teacher.clone());
            let mut sr_f = Vec::new();
            for bd in &bundles[1..] {
                sr_f.push(feature_distill_ce(t, ft, bd.adapted_features, tau)?);
            }
            let mut sr_l = Vec::new();
            for bd in &bundles[..k - 1] {
                sr_l.push(logit_distill_ce(t, lt, bd.cls_logits, tau)?);
            }
            let cls = sum(t, &cls)?;
            let cls = t.scale(cls, inv);
            let seg = sum(t, &seg)?;
            let seg = t.scale(seg, inv);
            let sr_f = sum(t, &sr_f)?;
            let sr_l = sum(t, &sr_l)?;
            let terms = [
                t.scale(cls, T::from_f64(weights.lambda1)),
                t.scale(seg, T::from_f64(weights.lambda2)),
                t.scale(sr_f, T::from_f64(weights.lambda3)),
                sr_l,
            ];
            sum(t, &terms)
        }),
    })
}

fn sum<T: Real>(t: &mut Tape<T>, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = t.add(acc, v)?;
    }
    Ok(acc)
}

fn unknown_op(name: &str) -> Error {
    Error::invalid(
        "gradcheck",
        format!("unknown op {name:?}; expected one of {}", OPS.join(", ")),
    )
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        max_abs_error: a.max_abs_error.max(b.max_abs_error),
        checked: a.checked + b.checked,
    }
}

/// Checks one op over `settings.cases` random shapes.
pub fn check_op<T: Real + 'static>(op: &str, settings: &SuiteSettings) -> Result<SuiteEntry> {
    let Some(idx) = OPS.iter().position(|&o| o == op) else {
        return Err(unknown_op(op));
    };
    let name = OPS[idx];
    let mut rng = rng_for(settings.seed, &[idx as u64]);
    let cases = if name == "training_objective" {
        1
    } else {
        settings.cases
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for _ in 0..cases {
        let case = if name == "training_objective" {
            objective_case::<T>(&mut rng, settings.seed)?
        } else {
            op_case::<T>(name, &mut rng)?
        };
        report = merge(report, grad_check(&case.f, &case.inputs, settings.eps)?);
    }
    Ok(SuiteEntry {
        op: name,
        cases,
        report,
        passed: report.max_rel_error <= settings.tolerance,
    })
}

/// Runs the named op, or every op when `only` is `None`.
pub fn run_suite<T: Real + 'static>(only: Option<&str>, settings: &SuiteSettings) -> Result<Vec<SuiteEntry>> {
    match only {
        Some(op) => Ok(vec![check_op::<T>(op, settings)?]),
        None => OPS.iter().map(|op| check_op::<T>(op, settings)).collect(),
    }
}
