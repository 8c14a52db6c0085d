//! 2-D convolution lowered to matrix products via im2col.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, MatRef, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Output columns `[lo, hi)` whose input column `ow*stride + kj - padding`
/// falls inside the image.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
    let hi = if g.in_w + p > kj {
        ((g.in_w - 1 + p - kj) / s + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let area = g.out_area();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                let (lo, hi) = valid_span(g, kj);
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki) as isize - p as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * s + kj - p;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let area = g.out_area();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * area..(row + 1) * area];
                let (lo, hi) = valid_span(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * s + kj - p;
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    let line = &src[oh * g.out_w + lo..oh * g.out_w + hi];
                    if s == 1 {
                        for (d, v) in dst[first..first + line.len()].iter_mut().zip(line) {
                            *d = *d + *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(s).zip(line) {
                            *d = *d + *v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of a B×C×H×W input with an O×C×K×K kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (batch, in_c, in_h, in_w) = self.value(input).dims4(OP)?;
        let (out_c, wc, kh, kw) = self.value(weight).dims4(OP)?;
        if wc != in_c {
            return Err(Error::shape(
                OP,
                format!("input channels {in_c} != weight input channels {wc}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                OP,
                format!("kernel must be square with odd extent, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(Error::shape(
                OP,
                format!("kernel {kh} larger than padded input height/width {in_h}x{in_w} (+2*{padding})"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_c] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {:?} != output channels [{out_c}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kernel: kh,
            stride,
            padding,
            out_h: conv_out_extent(in_h, kh, stride, padding),
            out_w: conv_out_extent(in_w, kw, stride, padding),
        };
        let (patch, area) = (geom.patch(), geom.out_area());
        let mut cols = vec![T::zero(); batch * patch * area];
        let mut out = vec![T::zero(); batch * out_c * area];
        {
            let x = self.value(input);
            let w = self.value(weight).data();
            for b in 0..batch {
                let col = &mut cols[b * patch * area..(b + 1) * patch * area];
                im2col(&geom, x.batch_item(b), col);
                let dst = &mut out[b * out_c * area..(b + 1) * out_c * area];
                matmul(MatRef::new(w, out_c, patch), MatRef::new(col, patch, area), dst, false);
                if let Some(bv) = bias {
                    let bias_data = self.value(bv).data();
                    for (o, row) in dst.chunks_exact_mut(area).enumerate() {
                        row.iter_mut().for_each(|v| *v = *v + bias_data[o]);
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, out_c, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    g: &ConvGeom,
    cols: &[T],
    dy: &[T],
) {
    let (patch, area) = (g.patch(), g.out_area());
    let per_out = g.out_c * area;
    if let Some(b) = bias {
        sink.add(b, |gb| {
            for bi in 0..g.batch {
                for (o, row) in dy[bi * per_out..(bi + 1) * per_out].chunks_exact(area).enumerate() {
                    gb[o] = gb[o] + row.iter().copied().sum::<T>();
                }
            }
        });
    }
    sink.add(weight, |gw| {
        for bi in 0..g.batch {
            let dyb = &dy[bi * per_out..(bi + 1) * per_out];
            let col = &cols[bi * patch * area..(bi + 1) * patch * area];
            matmul(
                MatRef::new(dyb, g.out_c, area),
                MatRef::new(col, patch, area).t(),
                gw,
                true,
            );
        }
    });
    if sink.wants(input) {
        let w = tape.value(weight).data();
        let per_in = g.in_c * g.in_h * g.in_w;
        let mut dcols = vec![T::zero(); patch * area];
        sink.add(input, |gx| {
            for bi in 0..g.batch {
                let dyb = &dy[bi * per_out..(bi + 1) * per_out];
                matmul(
                    MatRef::new(w, g.out_c, patch).t(),
                    MatRef::new(dyb, g.out_c, area),
                    &mut dcols,
                    false,
                );
                col2im_add(g, &dcols, &mut gx[bi * per_in..(bi + 1) * per_in]);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_value(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let mut tape = Tape::new();
        let (x, w, b) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let y = tape.conv2d(x, w, Some(b), s, p).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn scalar_product_case() {
        let y = conv_value(
            Tensor::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap(),
            Tensor::from_f64(&[1, 1, 1, 1], &[3.0]).unwrap(),
            Tensor::from_f64(&[1], &[0.0]).unwrap(),
            1,
            0,
        );
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn sum_of_ones_case() {
        let y = conv_value(
            Tensor::full(&[1, 1, 3, 3], 1.0),
            Tensor::full(&[1, 1, 3, 3], 1.0),
            Tensor::zeros(&[1]),
            1,
            0,
        );
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out_extent(5, 3, 2, 1), 3);
        assert_eq!(conv_out_extent(64, 3, 2, 1), 32);
        assert_eq!(conv_out_extent(8, 1, 1, 0), 8);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[2, 4, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
    }

    #[test]
    fn even_kernel_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
    }
}
