//! Fused reductions used by the supervised loss terms.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Tape<T> {
    /// Mean negative log-likelihood: `logp` is `[B, C, ...]` log-probabilities,
    /// `targets` holds one class index per `(b, ...)` position.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        const OP: &str = "nll";
        let shape = self.shape(logp);
        if shape.len() < 2 {
            return Err(Error::shape(OP, format!("expected at least 2-D input, got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if targets.len() != b * inner {
            return Err(Error::shape(
                OP,
                format!("{} targets for {} positions", targets.len(), b * inner),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(OP, format!("target class {bad} out of range [0, {c})")));
        }
        let x = self.value(logp).data();
        let mut total = T::zero();
        for (pos, &t) in targets.iter().enumerate() {
            let (bi, s) = (pos / inner, pos % inner);
            total = total + x[(bi * c + t) * inner + s];
        }
        let value = Tensor::scalar(-total / T::from_f64(targets.len() as f64));
        Ok(self.push(
            value,
            &[logp],
            Op::Nll {
                logp,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy on sigmoid(logits), evaluated as
    /// `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        const OP: &str = "bce_with_logits";
        let x = self.value(logits).data();
        if labels.len() != x.len() {
            return Err(Error::shape(
                OP,
                format!("{} labels for logits of shape {:?}", labels.len(), self.shape(logits)),
            ));
        }
        if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::invalid(OP, "labels must be 0 or 1"));
        }
        let total: T = x
            .iter()
            .zip(labels)
            .map(|(&v, &y)| v.max(T::zero()) - v * y + (-v.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / T::from_f64(x.len() as f64));
        Ok(self.push(
            value,
            &[logits],
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }
}

pub(crate) fn nll_backward<T: Real>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    logp: Var,
    targets: &[usize],
    dy: &[T],
) {
    let shape = tape.shape(logp);
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let d = -dy[0] / T::from_f64(targets.len() as f64);
    sink.add(logp, |g| {
        for (pos, &t) in targets.iter().enumerate() {
            let (bi, s) = (pos / inner, pos % inner);
            let i = (bi * c + t) * inner + s;
            g[i] = g[i] + d;
        }
    });
}

pub(crate) fn bce_backward<T: Real>(tape: &Tape<T>, sink: &mut GradSink<'_, T>, logits: Var, labels: &[T], dy: &[T]) {
    let x = tape.value(logits).data();
    let k = dy[0] / T::from_f64(x.len() as f64);
    sink.add(logits, |g| {
        for ((g, &v), &y) in g.iter_mut().zip(x).zip(labels) {
            let sig = T::one() / (T::one() + (-v).exp());
            *g = *g + k * (sig - y);
        }
    });
}
