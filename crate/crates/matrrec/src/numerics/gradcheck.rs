//! Central finite-difference gradient oracle. Uses forward evaluations
//! only, so it stays independent of the backward rules it checks.

use super::real::Real;
use super::tensor::Tensor;

/// Central finite-difference gradient of `loss_fn` with respect to
/// `param`, perturbing one element at a time with step `h`.
///
/// `loss_fn` must re-run the whole forward pass and return the scalar
/// loss; it observes the perturbation through the shared parameter
/// storage.
pub fn finite_difference_grad<R: Real>(
    param: &Tensor<R>,
    h: f64,
    loss_fn: &mut dyn FnMut() -> f64,
) -> Vec<f64> {
    let original = param.to_vec();
    let n = original.len();
    let mut grad = vec![0.0; n];
    let mut work = original.clone();
    for i in 0..n {
        let base = original[i].to_f64();
        work[i] = R::from_f64(base + h);
        param.set_data(&work).unwrap();
        let plus = loss_fn();
        work[i] = R::from_f64(base - h);
        param.set_data(&work).unwrap();
        let minus = loss_fn();
        work[i] = original[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    param.set_data(&original).unwrap();
    grad
}

/// Relative error with a floor so that near-zero gradients compare
/// absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between an analytic gradient and its
/// finite-difference estimate.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
