use super::{same_shape, GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, MatRef, Real, Tensor};

/// `(batch, channels, inner)` for channel-wise ops over `[B, C, ...]` tensors.
fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("expected at least 2-D input, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, &[a], Op::Relu(a))
    }

    /// `x·Wᵀ + b` for `x: [B, I]`, `W: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (batch, in_f) = match self.shape(input) {
            &[b, i] => (b, i),
            s => return Err(Error::shape(OP, format!("input must be 2-D, got {s:?}"))),
        };
        let out_f = match self.shape(weight) {
            &[o, i] if i == in_f => o,
            s => {
                return Err(Error::shape(
                    OP,
                    format!("weight {s:?} does not accept {in_f} input features"),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {:?} != output features [{out_f}]", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); batch * out_f];
        matmul(
            MatRef::new(self.value(input).data(), batch, in_f),
            MatRef::new(self.value(weight).data(), out_f, in_f).t(),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(out_f) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let value = Tensor::new(&[batch, out_f], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, &inputs, Op::Linear { input, weight, bias }))
    }

    /// Spatial mean of a B×C×H×W tensor, giving B×C.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4("global_avg_pool")?;
        let area = T::from_f64((h * w) as f64);
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks_exact(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() / area)
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        Ok(self.push(value, &[a], Op::GlobalAvgPool(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, &[a], Op::Scale(a, s))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.ln());
        self.push(value, &[a], Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        self.push(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    /// Softmax over axis 1 of a `[B, C, ...]` tensor, max-subtracted.
    pub fn channel_softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_values(self.value(a), false)?;
        Ok(self.push(value, &[a], Op::Softmax(a)))
    }

    /// Log-softmax over axis 1 with the max subtracted before exponentiating.
    pub fn channel_log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_values(self.value(a), true)?;
        Ok(self.push(value, &[a], Op::LogSoftmax(a)))
    }

    /// Concatenation along the channel axis of 4-D tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let Some(&first) = parts.first() else {
            return Err(Error::invalid(OP, "nothing to concatenate"));
        };
        let (b, _, h, w) = self.value(first).dims4(OP)?;
        let mut total_c = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4(OP)?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape(
                    OP,
                    format!(
                        "part {:?} does not match batch/height/width of {:?}",
                        self.shape(p),
                        self.shape(first)
                    ),
                ));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(b * total_c * h * w);
        for bi in 0..b {
            for &p in parts {
                out.extend_from_slice(self.value(p).batch_item(bi));
            }
        }
        let value = Tensor::new(&[b, total_c, h, w], out)?;
        Ok(self.push(value, parts, Op::Concat(parts.to_vec())))
    }
}

/// Channel softmax (or log-softmax) of a plain tensor.
pub(crate) fn softmax_values<T: Real>(x: &Tensor<T>, log: bool) -> Result<Tensor<T>> {
    let (b, c, inner) = channel_layout(x.shape(), if log { "channel_log_softmax" } else { "channel_softmax" })?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        let base = bi * c * inner;
        for s in 0..inner {
            let idx = |ch: usize| base + ch * inner + s;
            let m = (0..c).map(|ch| xd[idx(ch)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..c).map(|ch| (xd[idx(ch)] - m).exp()).sum();
            if log {
                let lz = z.ln();
                for ch in 0..c {
                    out[idx(ch)] = xd[idx(ch)] - m - lz;
                }
            } else {
                for ch in 0..c {
                    out[idx(ch)] = (xd[idx(ch)] - m).exp() / z;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn relu_backward<T: Real>(tape: &Tape<T>, sink: &mut GradSink<'_, T>, a: Var, dy: &[T]) {
    let x = tape.value(a).data();
    sink.add(a, |g| {
        for ((g, &d), &v) in g.iter_mut().zip(dy).zip(x) {
            if v > T::zero() {
                *g = *g + d;
            }
        }
    });
}

pub(crate) fn linear_backward<T: Real>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    dy: &[T],
) {
    let (batch, in_f) = (tape.shape(input)[0], tape.shape(input)[1]);
    let out_f = tape.shape(weight)[0];
    let x = tape.value(input).data();
    let w = tape.value(weight).data();
    sink.add(input, |g| {
        matmul(MatRef::new(dy, batch, out_f), MatRef::new(w, out_f, in_f), g, true);
    });
    sink.add(weight, |g| {
        matmul(MatRef::new(dy, batch, out_f).t(), MatRef::new(x, batch, in_f), g, true);
    });
    if let Some(b) = bias {
        sink.add(b, |g| {
            for row in dy.chunks_exact(out_f) {
                g.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
            }
        });
    }
}

pub(crate) fn gap_backward<T: Real>(tape: &Tape<T>, sink: &mut GradSink<'_, T>, a: Var, dy: &[T]) {
    let s = tape.shape(a);
    let area = s[2] * s[3];
    let inv = T::one() / T::from_f64(area as f64);
    sink.add(a, |g| {
        for (plane, &d) in g.chunks_exact_mut(area).zip(dy) {
            plane.iter_mut().for_each(|v| *v = *v + d * inv);
        }
    });
}

pub(crate) fn softmax_backward<T: Real>(sink: &mut GradSink<'_, T>, a: Var, y: &Tensor<T>, dy: &[T]) {
    let shape = y.shape();
    let (b, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let yd = y.data();
    sink.add(a, |g| {
        for bi in 0..b {
            let base = bi * c * inner;
            for s in 0..inner {
                let idx = |ch: usize| base + ch * inner + s;
                let dot: T = (0..c).map(|ch| dy[idx(ch)] * yd[idx(ch)]).sum();
                for ch in 0..c {
                    let i = idx(ch);
                    g[i] = g[i] + yd[i] * (dy[i] - dot);
                }
            }
        }
    });
}

pub(crate) fn log_softmax_backward<T: Real>(sink: &mut GradSink<'_, T>, a: Var, y: &Tensor<T>, dy: &[T]) {
    let shape = y.shape();
    let (b, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let yd = y.data();
    sink.add(a, |g| {
        for bi in 0..b {
            let base = bi * c * inner;
            for s in 0..inner {
                let idx = |ch: usize| base + ch * inner + s;
                let total: T = (0..c).map(|ch| dy[idx(ch)]).sum();
                for ch in 0..c {
                    let i = idx(ch);
                    g[i] = g[i] + dy[i] - yd[i].exp() * total;
                }
            }
        }
    });
}

pub(crate) fn concat_backward<T: Real>(tape: &Tape<T>, sink: &mut GradSink<'_, T>, parts: &[Var], dy: &[T]) {
    let b = tape.shape(parts[0])[0];
    let sizes: Vec<usize> = parts.iter().map(|&p| tape.value(p).len() / b).collect();
    let per: usize = sizes.iter().sum();
    let mut offset = 0;
    for (&p, &n) in parts.iter().zip(&sizes) {
        sink.add(p, |g| {
            for bi in 0..b {
                let src = &dy[bi * per + offset..bi * per + offset + n];
                g[bi * n..(bi + 1) * n]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(g, &d)| *g = *g + d);
            }
        });
        offset += n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value_of(f: impl FnOnce(&mut Tape<f64>) -> Var) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).clone()
    }

    #[test]
    fn relu_definition() {
        let y = value_of(|t| {
            let x = t.leaf(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
            t.relu(x)
        });
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gap_of_constant() {
        let y = value_of(|t| {
            let x = t.leaf(Tensor::full(&[2, 3, 4, 5], 1.25));
            t.global_avg_pool(x).unwrap()
        });
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn softmax_single_channel_is_one() {
        let y = value_of(|t| {
            let x = t.leaf(Tensor::from_f64(&[2, 1, 1, 3], &[5.0, -3.0, 0.1, 9.0, 2.0, -7.0]).unwrap());
            t.channel_softmax(x).unwrap()
        });
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let y = value_of(|t| {
            let x = t.leaf(Tensor::full(&[1, 4, 2, 2], 3.3));
            t.channel_softmax(x).unwrap()
        });
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_form_quarter() {
        let y = value_of(|t| {
            let x = t.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[0.0, 3f64.ln()]).unwrap());
            t.channel_softmax(x).unwrap()
        });
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_survives_huge_logits() {
        let y = value_of(|t| {
            let x = t.leaf(Tensor::from_f64(&[1, 2], &[1000.0, -1000.0]).unwrap());
            t.channel_log_softmax(x).unwrap()
        });
        assert!(y.all_finite());
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn linear_rejects_wrong_features() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[2, 3]));
        let w = t.leaf(Tensor::zeros(&[4, 5]));
        assert!(t.linear(x, w, None).is_err());
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
        assert!(t.mul(a, b).is_err());
    }

    #[test]
    fn concat_stacks_channels_per_item() {
        let y = value_of(|t| {
            let a = t.leaf(Tensor::from_f64(&[2, 1, 1, 1], &[1.0, 2.0]).unwrap());
            let b = t.leaf(Tensor::from_f64(&[2, 2, 1, 1], &[3.0, 4.0, 5.0, 6.0]).unwrap());
            t.concat_channels(&[a, b]).unwrap()
        });
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert_eq!(y.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
