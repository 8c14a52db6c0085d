//! Per-channel batch normalization.

use serde::{Deserialize, Serialize};

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential update with the batch mean and unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[T], batch_var_unbiased: &[T]) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

/// Batch statistics produced by a train-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn layout<T: Real>(
    tape: &Tape<T>,
    op: &'static str,
    input: Var,
    gamma: Var,
    beta: Var,
) -> Result<(usize, usize, usize)> {
    let shape = tape.shape(input);
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("expected at least 2-D input, got {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.shape(v) != [c] {
            return Err(Error::shape(
                op,
                format!("{name} shape {:?} != channels [{c}]", tape.shape(v)),
            ));
        }
    }
    Ok((b, c, inner))
}

impl<T: Real> Tape<T> {
    /// Normalizes with batch statistics; returns them for running-stat updates.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        const OP: &str = "batchnorm2d";
        let (b, c, inner) = layout(self, OP, input, gamma, beta)?;
        let n = b * inner;
        if n < 2 {
            return Err(Error::BatchNormPopulation(n));
        }
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let s = &x[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                mean[ch] = mean[ch] + s.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        for bi in 0..b {
            for ch in 0..c {
                let s = &x[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                let mu = mean[ch];
                var[ch] = var[ch] + s.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
        }
        let var_unbiased: Vec<T> = var.iter().map(|&v| v / T::from_f64((n - 1) as f64)).collect();
        var.iter_mut().for_each(|v| *v = *v / nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gm[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input), out)?;
        let v = self.push(
            value,
            &[input, gamma, beta],
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Normalizes with fixed running statistics.
    pub fn batchnorm_eval(&mut self, input: Var, gamma: Var, beta: Var, state: &BatchNormState<T>) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let (b, c, inner) = layout(self, OP, input, gamma, beta)?;
        if state.channels() != c {
            return Err(Error::shape(
                OP,
                format!("running stats hold {} channels, input has {c}", state.channels()),
            ));
        }
        let eps = T::from_f64(BN_EPS);
        let mean = state.running_mean.clone();
        let inv_std: Vec<T> = state.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = gm[ch] * ((x[i] - mean[ch]) * inv_std[ch]) + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input), out)?;
        Ok(self.push(
            value,
            &[input, gamma, beta],
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
        ))
    }

    /// Mode-dispatching normalization; train mode folds the batch statistics
    /// into `state` (momentum [`BN_MOMENTUM`]).
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: BnMode,
    ) -> Result<Var> {
        match mode {
            BnMode::Train => {
                let (v, stats) = self.batchnorm_train(input, gamma, beta)?;
                state.update(&stats.mean, &stats.var_unbiased);
                Ok(v)
            }
            BnMode::Eval => self.batchnorm_eval(input, gamma, beta, state),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_train_backward<T: Real>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    dy: &[T],
) {
    let shape = tape.shape(input);
    let (b, c) = (shape[0], shape[1]);
    let inner = xhat.len() / (b * c);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                sum_dy[ch] = sum_dy[ch] + dy[i];
                sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[i] * xhat[i];
            }
        }
    }
    sink.add(gamma, |g| axpy_slice(g, &sum_dy_xhat));
    sink.add(beta, |g| axpy_slice(g, &sum_dy));
    let gm = tape.value(gamma).data();
    let nf = T::from_f64((b * inner) as f64);
    sink.add(input, |gx| {
        for bi in 0..b {
            for ch in 0..c {
                let k = gm[ch] * inv_std[ch] / nf;
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    gx[i] = gx[i] + k * (nf * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_eval_backward<T: Real>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    input: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    inv_std: &[T],
    dy: &[T],
) {
    let shape = tape.shape(input);
    let (b, c) = (shape[0], shape[1]);
    let x = tape.value(input).data();
    let inner = x.len() / (b * c);
    let gm = tape.value(gamma).data();
    sink.add(gamma, |g| {
        for bi in 0..b {
            for (ch, gc) in g.iter_mut().enumerate() {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    *gc = *gc + dy[i] * (x[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
    });
    sink.add(beta, |g| {
        for bi in 0..b {
            for (ch, gc) in g.iter_mut().enumerate() {
                let base = (bi * c + ch) * inner;
                *gc = *gc + dy[base..base + inner].iter().copied().sum::<T>();
            }
        }
    });
    sink.add(input, |gx| {
        for bi in 0..b {
            for ch in 0..c {
                let k = gm[ch] * inv_std[ch];
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    gx[i] = gx[i] + k * dy[i];
                }
            }
        }
    });
}

fn axpy_slice<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + v;
    }
}
