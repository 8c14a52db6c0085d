//! Multi-exit supervision and the two self-distillation terms.
//!
//! * feature term: the first block's adapted features (a stop-gradient
//!   target) against every deeper block's adapted features, with a per-pixel
//!   channel softmax;
//! * logit term: the last block's classification logits (stop-gradient)
//!   against every shallower block's logits, with a class softmax.
//!
//! Both are temperature-scaled cross-entropies `τ² · CE(softmax(t/τ), softmax(s/τ))`.

use serde::{Deserialize, Serialize};

use crate::arch::ExitBundle;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Multi-exit classification weight.
    pub lambda1: f64,
    /// Multi-exit segmentation weight.
    pub lambda2: f64,
    /// Feature distillation weight. The logit term always has weight 1.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.2,
            lambda2: 0.8,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Adaptive distillation temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Temperature {
    pub tau: f64,
    pub growth_factor: f64,
    pub trigger_threshold: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature {
            tau: 1.0,
            growth_factor: 1.05,
            trigger_threshold: 0.5,
        }
    }
}

impl Temperature {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", format!("must be >= 1, got {}", self.tau)));
        }
        if !(self.growth_factor >= 1.0 && self.growth_factor.is_finite()) {
            return Err(Error::config(
                "growth_factor",
                format!("must be >= 1, got {}", self.growth_factor),
            ));
        }
        if !(self.trigger_threshold >= 0.0 && self.trigger_threshold.is_finite()) {
            return Err(Error::config(
                "trigger_threshold",
                format!("must be >= 0, got {}", self.trigger_threshold),
            ));
        }
        Ok(())
    }

    /// Largest max−min spread of any softened channel map in `maps`.
    pub fn softened_range<T: Real>(&self, maps: &[&Tensor<T>]) -> f64 {
        let inv = T::from_f64(1.0 / self.tau);
        maps.iter()
            .filter_map(|m| {
                let soft = crate::autodiff::channel_softmax_values(&m.map(|v| v * inv)).ok()?;
                let s = soft.shape();
                let inner: usize = s[2..].iter().product();
                soft.data()
                    .chunks_exact(inner)
                    .map(|plane| {
                        let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                            let v = v.as_f64();
                            (lo.min(v), hi.max(v))
                        });
                        hi - lo
                    })
                    .reduce(f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Multiplies τ by the growth factor when any softened map spreads more
    /// than the trigger threshold.
    pub fn updated<T: Real>(self, maps: &[&Tensor<T>]) -> Temperature {
        if self.softened_range(maps) > self.trigger_threshold {
            Temperature {
                tau: self.tau * self.growth_factor,
                ..self
            }
        } else {
            self
        }
    }
}

/// Temperature update from the adapted features of every exit in a minibatch.
pub fn update_temperature<T: Real>(temp: Temperature, tape: &Tape<T>, bundles: &[ExitBundle]) -> Temperature {
    let maps: Vec<&Tensor<T>> = bundles.iter().map(|b| tape.value(b.adapted_features)).collect();
    temp.updated(&maps)
}

/// Which loss terms a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub mea: bool,
    pub sr_f: bool,
    pub sr_l: bool,
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles {
        mea: false,
        sr_f: false,
        sr_l: false,
    };
    pub const FULL: Toggles = Toggles {
        mea: true,
        sr_f: true,
        sr_l: true,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.mea {
            parts.push("MEA");
        }
        if self.sr_f {
            parts.push("SR-F");
        }
        if self.sr_l {
            parts.push("SR-L");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

/// Scalar values of every term of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sr_cls: f64,
    pub sr_seg: f64,
    pub sr_f: f64,
    pub sr_l: f64,
    pub total: f64,
    pub per_exit_cls: Vec<f64>,
    pub per_exit_seg: Vec<f64>,
    /// Feature term per deep student (blocks 2..N).
    pub per_student_f: Vec<f64>,
    /// Logit term per shallow student (blocks 1..N-1).
    pub per_student_l: Vec<f64>,
}

impl LossBreakdown {
    /// `λ₁·sr_cls + λ₂·sr_seg + λ₃·sr_f + sr_l` from the stored fields.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.sr_cls + w.lambda2 * self.sr_seg + w.lambda3 * self.sr_f + self.sr_l
    }
}

/// An objective on the tape plus its logged values.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn distill_ce<T: Real>(tape: &mut Tape<T>, op: &'static str, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(Error::shape(
            op,
            format!("teacher {:?} vs student {:?}", tape.shape(teacher), tape.shape(student)),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(op, format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(student);
    let positions = shape[0] * shape[2..].iter().product::<usize>();
    let inv = T::from_f64(1.0 / tau);
    let target = tape.detach(teacher);
    let target = tape.scale(target, inv);
    let p = tape.channel_softmax(target)?;
    let s = tape.scale(student, inv);
    let log_q = tape.channel_log_softmax(s)?;
    let prod = tape.mul(p, log_q)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, T::from_f64(-tau * tau / positions as f64)))
}

/// `τ² · (−1/M) Σ_j Σ_c p_c(t_j) log p_c(s_j)` on B×C×H×W maps, batch-averaged;
/// `p = softmax(·/τ)` over channels. The teacher is a stop-gradient target.
pub fn feature_distill_ce<T: Real>(tape: &mut Tape<T>, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    const OP: &str = "feature_distill_ce";
    if tape.shape(student).len() != 4 {
        return Err(Error::shape(
            OP,
            format!("expected 4-D maps, got {:?}", tape.shape(student)),
        ));
    }
    distill_ce(tape, OP, teacher, student, tau)
}

/// Temperature-scaled cross-entropy between B×C logit sets.
pub fn logit_distill_ce<T: Real>(tape: &mut Tape<T>, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    const OP: &str = "logit_distill_ce";
    if tape.shape(student).len() != 2 {
        return Err(Error::shape(
            OP,
            format!("expected B×C logits, got {:?}", tape.shape(student)),
        ));
    }
    distill_ce(tape, OP, teacher, student, tau)
}

fn sum_vars<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn values<T: Real>(tape: &Tape<T>, vars: &[Var]) -> Vec<f64> {
    vars.iter().map(|&v| tape.value(v).item().as_f64()).collect()
}

/// Per-student feature terms, block 1 teaching blocks 2..N.
pub fn sr_f_terms<T: Real>(tape: &mut Tape<T>, bundles: &[ExitBundle], tau: f64) -> Result<Vec<Var>> {
    if bundles.len() < 2 {
        return Err(Error::invalid(
            "sr_f_loss",
            format!("needs at least 2 exits, got {}", bundles.len()),
        ));
    }
    let teacher = bundles[0].adapted_features;
    bundles[1..]
        .iter()
        .map(|b| feature_distill_ce(tape, teacher, b.adapted_features, tau))
        .collect()
}

pub fn sr_f_loss<T: Real>(tape: &mut Tape<T>, bundles: &[ExitBundle], tau: f64) -> Result<Var> {
    let terms = sr_f_terms(tape, bundles, tau)?;
    sum_vars(tape, &terms)
}

/// Per-student logit terms, block N teaching blocks 1..N-1.
pub fn sr_l_terms<T: Real>(tape: &mut Tape<T>, bundles: &[ExitBundle], tau: f64) -> Result<Vec<Var>> {
    if bundles.len() < 2 {
        return Err(Error::invalid(
            "sr_l_loss",
            format!("needs at least 2 exits, got {}", bundles.len()),
        ));
    }
    let (students, teacher) = bundles.split_at(bundles.len() - 1);
    let teacher = teacher[0].cls_logits;
    students
        .iter()
        .map(|b| logit_distill_ce(tape, teacher, b.cls_logits, tau))
        .collect()
}

pub fn sr_l_loss<T: Real>(tape: &mut Tape<T>, bundles: &[ExitBundle], tau: f64) -> Result<Var> {
    let terms = sr_l_terms(tape, bundles, tau)?;
    sum_vars(tape, &terms)
}

/// Pixel-averaged cross-entropy of B×C×H×W logits against a B×H×W class map.
pub fn seg_ce_loss<T: Real>(tape: &mut Tape<T>, seg_logits: Var, mask: &[usize]) -> Result<Var> {
    let logp = tape.channel_log_softmax(seg_logits)?;
    tape.nll(logp, mask)
}

/// Element-averaged binary cross-entropy of B×C logits against 0/1 labels.
pub fn cls_bce_loss<T: Real>(tape: &mut Tape<T>, cls_logits: Var, labels: &[T]) -> Result<Var> {
    tape.bce_with_logits(cls_logits, labels)
}

/// Coefficient per term; `None` means the term is not evaluated at all.
/// Terms with a zero coefficient are evaluated for logging but kept out of
/// the differentiated total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermCoefficients {
    pub cls: Option<f64>,
    pub seg: f64,
    /// Average the segmentation term over all exits instead of using only
    /// the final one.
    pub seg_all_exits: bool,
    pub sr_f: Option<f64>,
    pub sr_l: Option<f64>,
}

impl TermCoefficients {
    /// The full objective `λ₁·L_cls + λ₂·L_seg + λ₃·L_F + L_L`.
    pub fn full(w: &LossWeights) -> Self {
        TermCoefficients {
            cls: Some(w.lambda1),
            seg: w.lambda2,
            seg_all_exits: true,
            sr_f: Some(w.lambda3),
            sr_l: Some(1.0),
        }
    }

    /// Disabled terms drop out; without multi-exit supervision the objective
    /// falls back to plain cross-entropy on the final segmenter.
    pub fn for_toggles(w: &LossWeights, t: Toggles) -> Self {
        TermCoefficients {
            cls: t.mea.then_some(w.lambda1),
            seg: if t.mea { w.lambda2 } else { 1.0 },
            seg_all_exits: t.mea,
            sr_f: t.sr_f.then_some(w.lambda3),
            sr_l: t.sr_l.then_some(1.0),
        }
    }
}

/// Builds a weighted objective over the exits.
pub fn weighted_objective<T: Real>(
    tape: &mut Tape<T>,
    bundles: &[ExitBundle],
    mask: &[usize],
    labels: &[T],
    coef: &TermCoefficients,
    tau: f64,
) -> Result<LossGraph> {
    let Some(last) = bundles.last() else {
        return Err(Error::invalid("overall_sr_loss", "no exit bundles"));
    };
    let mut bd = LossBreakdown::default();
    let mut weighted: Vec<Var> = Vec::new();
    let add_term = |tape: &mut Tape<T>, v: Var, c: f64, weighted: &mut Vec<Var>| {
        if c != 0.0 {
            weighted.push(tape.scale(v, T::from_f64(c)));
        }
    };

    let seg_exits: Vec<Var> = if coef.seg_all_exits {
        bundles.iter().map(|b| b.seg_logits).collect()
    } else {
        vec![last.seg_logits]
    };
    let seg_terms = seg_exits
        .iter()
        .map(|&s| seg_ce_loss(tape, s, mask))
        .collect::<Result<Vec<_>>>()?;
    bd.per_exit_seg = values(tape, &seg_terms);
    let seg_sum = sum_vars(tape, &seg_terms)?;
    let seg = tape.scale(seg_sum, T::from_f64(1.0 / seg_terms.len() as f64));
    bd.sr_seg = tape.value(seg).item().as_f64();
    add_term(tape, seg, coef.seg, &mut weighted);

    if let Some(c) = coef.cls {
        let terms = bundles
            .iter()
            .map(|b| cls_bce_loss(tape, b.cls_logits, labels))
            .collect::<Result<Vec<_>>>()?;
        bd.per_exit_cls = values(tape, &terms);
        let s = sum_vars(tape, &terms)?;
        let v = tape.scale(s, T::from_f64(1.0 / terms.len() as f64));
        bd.sr_cls = tape.value(v).item().as_f64();
        add_term(tape, v, c, &mut weighted);
    }
    if let Some(c) = coef.sr_f {
        let terms = sr_f_terms(tape, bundles, tau)?;
        bd.per_student_f = values(tape, &terms);
        let v = sum_vars(tape, &terms)?;
        bd.sr_f = tape.value(v).item().as_f64();
        add_term(tape, v, c, &mut weighted);
    }
    if let Some(c) = coef.sr_l {
        let terms = sr_l_terms(tape, bundles, tau)?;
        bd.per_student_l = values(tape, &terms);
        let v = sum_vars(tape, &terms)?;
        bd.sr_l = tape.value(v).item().as_f64();
        add_term(tape, v, c, &mut weighted);
    }
    let total = if weighted.is_empty() {
        let z = tape.constant(Tensor::scalar(T::zero()));
        tape.scale(z, T::one())
    } else {
        sum_vars(tape, &weighted)?
    };
    bd.total = tape.value(total).item().as_f64();
    Ok(LossGraph { total, breakdown: bd })
}

/// `λ₁·L_cls + λ₂·L_seg + λ₃·L_F + L_L`, with both supervised terms averaged
/// over all exits.
pub fn overall_sr_loss<T: Real>(
    tape: &mut Tape<T>,
    bundles: &[ExitBundle],
    mask: &[usize],
    labels: &[T],
    weights: &LossWeights,
    tau: f64,
) -> Result<LossGraph> {
    weights.validate()?;
    weighted_objective(tape, bundles, mask, labels, &TermCoefficients::full(weights), tau)
}

/// Channel-wise `σ(x)^{1/τ}` renormalized to sum to one, the literal
/// power form of a softened distribution.
pub fn renormalized_power<T: Real>(x: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let soft = crate::autodiff::channel_softmax_values(x)?;
    let inv = T::from_f64(1.0 / tau);
    let powered = soft.map(|v| v.powf(inv));
    let s = powered.shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = powered.clone();
    let d = out.data_mut();
    for bi in 0..b {
        for j in 0..inner {
            let idx = |ch: usize| (bi * c + ch) * inner + j;
            let z: T = (0..c).map(|ch| d[idx(ch)]).sum();
            for ch in 0..c {
                d[idx(ch)] = d[idx(ch)] / z;
            }
        }
    }
    Ok(out)
}
