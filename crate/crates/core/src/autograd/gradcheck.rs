//! Central finite-difference verification of tape gradients.
//!
//! The numeric derivative uses the fourth-order central stencil
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, which keeps truncation
//! error small at steps large enough to avoid cancellation. For functions
//! with kinks (ReLU networks) the step is shrunk per element until the
//! probes stay on the base point's smooth piece.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

/// Relative error floor used when both gradients vanish.
pub const REL_FLOOR: f64 = 1e-12;

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, flat element) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn scalar_value<T: Real>(tape: &Tape<T>, out: Var) -> Result<T> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Grad(format!(
            "checked function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `epsilon`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, epsilon: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let report = finite_diff_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), epsilon)?;
    Ok(report.max_rel_error)
}

/// Like [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<T, F>(f: F, inputs: &[Tensor<T>], epsilon: f64) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Domain("finite difference step must be positive".into()));
    }
    check_with(f, inputs, |at, _| {
        let (p1, m1) = (at(epsilon)?.0, at(-epsilon)?.0);
        let (p2, m2) = (at(2.0 * epsilon)?.0, at(-2.0 * epsilon)?.0);
        Ok(stencil(p1, m1, p2, m2, epsilon))
    })
}

/// Gradient check for piecewise-smooth functions. Each element tries steps
/// `h0, h0/4, h0/16, …` ([`PIECEWISE_RUNGS`] of them) and applies the
/// fourth-order stencil at the first step whose probes all take the same
/// non-smooth branches as the base point (equal
/// [`Tape::branch_signature`]). If none does, the smallest step is used.
pub fn piecewise_check_many<T, F>(f: F, inputs: &[Tensor<T>], h0: f64) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if h0 <= 0.0 {
        return Err(Error::Domain("finite difference step must be positive".into()));
    }
    check_with(f, inputs, |at, base| {
        let mut h = h0;
        for rung in 0..PIECEWISE_RUNGS {
            let (p1, s1) = at(h)?;
            let (m1, s2) = at(-h)?;
            let (p2, s3) = at(2.0 * h)?;
            let (m2, s4) = at(-2.0 * h)?;
            if [s1, s2, s3, s4].iter().all(|&s| s == base) || rung + 1 == PIECEWISE_RUNGS {
                return Ok(stencil(p1, m1, p2, m2, h));
            }
            h /= 4.0;
        }
        unreachable!()
    })
}

pub const PIECEWISE_RUNGS: usize = 6;

fn stencil(p1: f64, m1: f64, p2: f64, m2: f64, h: f64) -> f64 {
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

fn check_with<T, F, D>(f: F, inputs: &[Tensor<T>], mut derivative: D) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    D: FnMut(&mut dyn FnMut(f64) -> Result<(f64, u64)>, u64) -> Result<f64>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)?;
    let base = tape.branch_signature();
    let grads = tape.backward(out)?;

    let eval = |probe: &[Tensor<T>]| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok((scalar_value(&t, o)?.as_f64(), t.branch_signature()))
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..x.len() {
            let orig = x.data()[i];
            let numeric = derivative(&mut |step: f64| {
                probe[k].data_mut()[i] = T::lit(orig.as_f64() + step);
                eval(&probe)
            }, base);
            probe[k].data_mut()[i] = orig;
            let numeric = numeric?;

            let a = analytic.data()[i].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: rel,
                    worst: (k, i),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
