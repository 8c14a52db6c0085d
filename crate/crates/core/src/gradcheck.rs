//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of scalar inputs perturbed.
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<T: Real, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of scalar `f` against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps` for every element of every input.
/// Only meaningful at 64-bit; a 32-bit run is a coarse smoke test.
pub fn grad_check<T: Real, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let (mut tape, vars, out) = evaluate(&f, inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..probe[k].len() {
            let orig = probe[k].data()[i];
            let up = orig + T::from_f64(eps);
            let down = orig - T::from_f64(eps);
            probe[k].data_mut()[i] = up;
            let plus = scalar_of(&f, &probe)?;
            probe[k].data_mut()[i] = down;
            let minus = scalar_of(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            // divide by the step actually representable at this precision
            let numeric = (plus - minus) / (up - down).as_f64();
            let a = grad.data()[i].as_f64();
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

fn scalar_of<T: Real, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_f64(&[4], &[0.3, -0.2, 0.5, 0.125]).unwrap();
        let report = grad_check(
            |t, v| {
                let s = t.scale(v[0], 1.5);
                Ok(t.sum(s))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_positive_eps_rejected() {
        let x = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x], 0.0).is_err());
    }
}
