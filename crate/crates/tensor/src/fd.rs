//! Numerical gradient oracle.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::Result;

/// Central-difference gradient of a scalar-valued function.
///
/// For each coordinate `i` this evaluates `f` at `x ± step·eᵢ` and returns
/// `(f(x + step·eᵢ) − f(x − step·eᵢ)) / (2·step)`. The function is free to
/// rebuild whatever computation it likes on each call; only the scalar result
/// matters. Used as the independent check that the tape's analytic gradients
/// are right.
pub fn finite_diff_grad<S, F>(mut f: F, x: &[S], step: S) -> Result<Vec<S>>
where
    S: Scalar,
    F: FnMut(&[S]) -> Result<S>,
{
    if !step.is_finite() || step <= S::zero() {
        return Err(TensorError::BadStep);
    }
    let two = S::from_f64(2.0).expect("small integer fits any float");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe)?;
        probe[i] = orig - step;
        let lo = f(&probe)?;
        probe[i] = orig;
        let slope = (hi - lo) / (two * step);
        if !slope.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad.push(slope);
    }
    Ok(grad)
}
