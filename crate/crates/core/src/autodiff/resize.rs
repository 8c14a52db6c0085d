//! Bilinear resizing with the half-pixel (align-corners = false) convention.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Source taps for one destination coordinate along an axis:
/// `(lower index, upper index, lower weight, upper weight)`.
pub fn resize_coords(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) struct ResizeMap<T> {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    planes: usize,
    rows: Vec<(usize, usize, T, T)>,
    cols: Vec<(usize, usize, T, T)>,
}

fn cast<T: Real>(taps: Vec<(usize, usize, f64, f64)>) -> Vec<(usize, usize, T, T)> {
    taps.into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb)))
        .collect()
}

impl<T: Real> Tape<T> {
    /// Bilinear resize of a B×C×H×W tensor to B×C×`out_h`×`out_w`.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "bilinear_upsample";
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(OP, "output size must be at least 1x1"));
        }
        let (b, c, in_h, in_w) = self.value(input).dims4(OP)?;
        let map = ResizeMap {
            in_h,
            in_w,
            out_h,
            out_w,
            planes: b * c,
            rows: cast(resize_coords(in_h, out_h)),
            cols: cast(resize_coords(in_w, out_w)),
        };
        let x = self.value(input).data();
        let mut out = vec![T::zero(); map.planes * out_h * out_w];
        for p in 0..map.planes {
            let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy0, wy1)) in map.rows.iter().enumerate() {
                let r0 = &src[y0 * in_w..(y0 + 1) * in_w];
                let r1 = &src[y1 * in_w..(y1 + 1) * in_w];
                for (ox, &(x0, x1, wx0, wx1)) in map.cols.iter().enumerate() {
                    dst[oy * out_w + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                }
            }
        }
        let value = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.push(value, &[input], Op::Resize { input, map }))
    }
}

pub(crate) fn resize_backward<T: Real>(sink: &mut GradSink<'_, T>, input: Var, map: &ResizeMap<T>, dy: &[T]) {
    let (in_h, in_w, out_h, out_w) = (map.in_h, map.in_w, map.out_h, map.out_w);
    sink.add(input, |gx| {
        for p in 0..map.planes {
            let src = &dy[p * out_h * out_w..(p + 1) * out_h * out_w];
            let dst = &mut gx[p * in_h * in_w..(p + 1) * in_h * in_w];
            for (oy, &(y0, y1, wy0, wy1)) in map.rows.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in map.cols.iter().enumerate() {
                    let d = src[oy * out_w + ox];
                    dst[y0 * in_w + x0] = dst[y0 * in_w + x0] + d * wy0 * wx0;
                    dst[y0 * in_w + x1] = dst[y0 * in_w + x1] + d * wy0 * wx1;
                    dst[y1 * in_w + x0] = dst[y1 * in_w + x0] + d * wy1 * wx0;
                    dst[y1 * in_w + x1] = dst[y1 * in_w + x1] + d * wy1 * wx1;
                }
            }
        }
    });
}
