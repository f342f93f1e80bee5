//! Central finite-difference gradient checking in 64-bit precision.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor, so exact zeros compare cleanly.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-8)
}

/// Below this absolute gap the two estimates agree to within central
/// difference roundoff, so the pair counts as exact.
pub const ABS_FLOOR: f64 = 1e-10;

fn pair_error(a: f64, b: f64) -> f64 {
    if (a - b).abs() < ABS_FLOOR {
        0.0
    } else {
        relative_error(a, b)
    }
}

/// Compares the tape gradient of `loss_fn` against `(f(p+h) - f(p-h)) / 2h`
/// for every element of every parameter, or for `per_tensor` evenly spaced
/// elements of each parameter when set.
pub fn check_gradients<F>(params: &[Tensor<f64>], loss_fn: F, step: f64, per_tensor: Option<usize>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = loss_fn(&tape, &vars)?;
        loss.value().item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|v| grads.get(*v).cloned()).collect::<Result<_>>()?;

    let mut report = GradCheckReport { max_rel_error: 0.0, param: 0, element: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let numel = p.numel();
        let elems: Vec<usize> = match per_tensor {
            Some(k) if k < numel => (0..k).map(|i| i * (numel - 1) / (k - 1).max(1)).collect(),
            _ => (0..numel).collect(),
        };
        for e in elems {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[e];
            let rel = pair_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error {
                report = GradCheckReport { max_rel_error: rel, param: pi, element: e, analytic: a, numeric, checked: report.checked };
            }
        }
    }
    Ok(report)
}
