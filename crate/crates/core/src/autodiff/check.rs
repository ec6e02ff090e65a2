use crate::error::{Error, Result};

use super::{Scalar, Tape, Tensor, Var};

/// Compares the tape's analytic gradient of a scalar function against
/// central finite differences, for every coordinate of every input.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn gradient_check<T, F>(inputs: &[Tensor<T>], f: F, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?.to_f64();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value is not finite: {v}")));
        }
        Ok(v)
    };
    eval(inputs)?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.iter().map(|x| x.to_f64()).collect())
                .unwrap_or_default()
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = T::from_f64(orig.to_f64() + eps);
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = T::from_f64(orig.to_f64() - eps);
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[ti][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`gradient_check`].
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    gradient_check(std::slice::from_ref(x), |tape, v| f(tape, v[0]), eps)
}
