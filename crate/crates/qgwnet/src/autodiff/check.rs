//! Gradient checking against central finite differences.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Checks the analytic gradient of a scalar-valued function of one tensor.
///
/// Returns the max over elements of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` with the
/// numeric side from central differences of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_multi(move |tape, vars| f(tape, vars[0]), &[x.clone()], h)
}

/// [`grad_check`] over several independent leaves (e.g. parameter groups).
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    for x in inputs {
        if !x.is_finite() {
            return Err(Error::invalid("grad_check", "input must be finite"));
        }
    }

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&tape, &vars)?;
    if !loss.value().is_scalar() {
        return Err(Error::invalid("grad_check", "function must be scalar-valued"));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |points: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.scalar_value()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for ti in 0..inputs.len() {
        for i in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_to_near_zero() {
        let x = Tensor::from_vec(vec![5], vec![0.4, -1.0, 2.0, 3.5, -0.2]).unwrap();
        let err = grad_check(|_t, v| v.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "sum is linear, got {err}");
    }

    #[test]
    fn composite_graph_checks_under_1e4() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.3, -0.8, 1.2, 0.1, -1.5, 0.7]).unwrap();
        let err = grad_check(
            |_t, v| v.tanh()?.mul(v.sigmoid()?)?.sum(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_non_scalar_functions() {
        let x = Tensor::zeros(vec![3]);
        assert!(grad_check(|_t, v| v.tanh(), &x, 1e-5).is_err());
    }
}
