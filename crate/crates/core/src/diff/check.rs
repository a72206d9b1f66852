use super::{DiffError, Tensor};

/// Numerically differentiates a scalar function of several tensors.
///
/// Central differences per element: `(f(x + e) - f(x - e)) / 2e`, where the
/// step is `eps` scaled by the element magnitude, `e = eps * max(1, |x|)`.
/// The scale keeps the step meaningful across inputs spanning, say, depths in
/// the hundreds and unit-norm directions.
///
/// Returns one gradient tensor per input, in order. This is the oracle the
/// gradient tests compare every tape backward pass against; it is exact for
/// affine functions and second-order accurate otherwise.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64, DiffError>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>, DiffError> {
    assert!(eps > 0.0, "step must be positive");
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[ti].shape());
        for ei in 0..inputs[ti].numel() {
            let x0 = inputs[ti].data()[ei];
            let e = eps * x0.abs().max(1.0);
            work[ti].data_mut()[ei] = x0 + e;
            let fp = f(&work)?;
            work[ti].data_mut()[ei] = x0 - e;
            let fm = f(&work)?;
            work[ti].data_mut()[ei] = x0;
            grad.data_mut()[ei] = (fp - fm) / (2.0 * e);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Largest relative disagreement between two gradient sets, with the usual
/// unit floor in the denominator: `|a - b| / max(1, |a|, |b|)`.
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (x, y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
