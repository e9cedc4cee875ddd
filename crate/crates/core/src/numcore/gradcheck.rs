//! Finite-difference validation of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Added to the finite-difference magnitude in the relative-error
/// denominator so that vanishing gradients do not divide by zero.
pub const EPSILON_FLOOR: f64 = 1e-6;

/// Worst entry found by [`grad_check_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub param: usize,
    pub entry: usize,
    pub autodiff: f64,
    pub numeric: f64,
}

/// Returns the maximum over every parameter entry of
/// `|autodiff − numeric| / (|numeric| + EPSILON_FLOOR)`, where `numeric` is a
/// fourth-order central difference with step `epsilon`.
///
/// ```
/// use weightscope::numcore::{grad_check, Tensor};
///
/// let err = grad_check(|_, p| (p[0] * p[0]).sum(), &[Tensor::scalar(3.0)], 1e-4).unwrap();
/// assert!(err < 1e-8);
/// ```
pub fn grad_check<F>(function: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    grad_check_report(function, params, epsilon).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(function: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(epsilon > 0.0) {
        return Err(Error::arg("grad_check epsilon must be positive"));
    }
    let eval = |values: &[Tensor], param: usize, entry: usize| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = function(&tape, &vars);
        let v = out.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { context: format!("grad_check function (param {param}, entry {entry})") })
        }
    };

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = function(&tape, &vars);
    if !out.item().is_finite() {
        return Err(Error::NonFinite { context: "grad_check function at the base point".into() });
    }
    let grads: Vec<Tensor> = tape.grad(out, &vars).iter().map(|g| (*g.value()).clone()).collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        param: 0,
        entry: 0,
        autodiff: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, grad) in grads.iter().enumerate() {
        for e in 0..params[p].len() {
            let x0 = params[p].data()[e];
            let mut at = |offset: f64| -> Result<f64> {
                work[p].data_mut()[e] = x0 + offset;
                let v = eval(&work, p, e);
                work[p].data_mut()[e] = x0;
                v
            };
            let h = epsilon;
            let numeric = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
            let auto = grad.data()[e];
            let rel = (auto - numeric).abs() / (numeric.abs() + EPSILON_FLOOR);
            if rel > report.max_relative_error {
                report = GradCheckReport { max_relative_error: rel, param: p, entry: e, autodiff: auto, numeric };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        assert_eq!(tape.grad(x * x, &[x])[0].item(), 6.0);
        let err = grad_check(|_, p| p[0] * p[0], &[Tensor::scalar(3.0)], 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sine_with_frequency_thirty_matches_closed_form() {
        let omega = 30.0;
        let x0 = 0.1;
        let tape = Tape::new();
        let x = tape.scalar(x0);
        let g = tape.grad(x.scale(omega).sin(), &[x])[0].item();
        let closed = omega * (omega * x0).cos();
        assert!((g - closed).abs() / closed.abs() < 1e-12);
        let err = grad_check(|_, p| p[0].scale(omega).sin(), &[Tensor::scalar(x0)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient_and_zero_error() {
        let err = grad_check(
            |tape, _| tape.scalar(4.0),
            &[Tensor::row(vec![1.0, -2.0])],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_value_names_the_parameter() {
        let res = grad_check(|_, p| p[1].ln().sum(), &[Tensor::scalar(1.0), Tensor::scalar(1e-5)], 1e-4);
        match res {
            Err(Error::NonFinite { context }) => assert!(context.contains("param 1"), "{context}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
