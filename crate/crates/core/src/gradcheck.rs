//! Central finite-difference oracle for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator, so near-zero gradients do not blow up.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Max relative error between the tape gradient of `f` at `x` and central differences.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_gradients(|tape, p| f(tape, p[0]), std::slice::from_ref(x), step)
}

/// Like [`finite_difference_check`] for a function of several parameter tensors.
///
/// Every entry of every parameter is perturbed; the returned value is the
/// maximum relative error over all of them.
pub fn check_gradients<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(per_parameter_errors(f, params, step)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Max relative error per parameter tensor.
pub fn per_parameter_errors<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars)?.item();
        if !y.is_finite() {
            return Err(Error::NumericDomain(format!(
                "function value {y} is not finite"
            )));
        }
        Ok(y)
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|t| tape.param(t.clone())).collect();
        let y = f(&tape, &vars)?;
        if !y.item().is_finite() {
            return Err(Error::NumericDomain(format!(
                "function value {} is not finite",
                y.item()
            )));
        }
        let grads = tape.backward(y)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            work[pi] = Tensor::new(p.shape(), plus)?;
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus[i] -= step;
            work[pi] = Tensor::new(p.shape(), minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi].data()[i];
            let denom = a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
        work[pi] = p.clone();
        errors.push(max_err);
    }
    Ok(errors)
}
