//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorResult, Var};
use crate::scalar::Scalar;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
///
/// `f` must rebuild the same expression every call: it receives a fresh tape
/// and the variable holding the evaluation point, and returns the scalar root.
pub fn gradient_check<S, F>(f: F, point: &Tensor<S>, step: S) -> TensorResult<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> TensorResult<Var>,
{
    assert!(step > S::zero(), "finite-difference step must be positive");

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let root = f(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get(x);

    let eval = |p: &Tensor<S>| -> TensorResult<S> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let r = f(&mut t, v)?;
        Ok(t.value(r).item())
    };

    let eps = S::of(1e-12);
    let two = S::of(2.0);
    let mut max_err = S::zero();
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let central = (eval(&plus)? - eval(&minus)?) / (two * step);
        let a = analytic.data()[i];
        let err = (a - central).abs() / (a.abs() + central.abs() + eps);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
