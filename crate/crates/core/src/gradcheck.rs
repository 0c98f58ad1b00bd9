//! Central finite differences, the oracle for every analytic gradient.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate `i` of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, epsilon: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Tensor::new(x.shape(), grad)
}

/// Largest relative error between two gradients, skipping coordinates
/// where both magnitudes are at most `floor`.
///
/// The relative error of a coordinate is `|a − b| / max(|a|, |b|)`.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter_map(|(&a, &b)| {
            let a = a.to_f64_lossy();
            let scale = a.abs().max(b.abs());
            (scale > floor).then(|| (a - b).abs() / scale)
        })
        .fold(0.0, f64::max)
}
