use super::{NumError, Tensor};

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    theta: &Tensor,
    eps: f64,
) -> Result<Tensor, NumError> {
    if !(eps > 0.0) {
        return Err(NumError::Shape(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let x = theta.data()[i];
        probe.data_mut()[i] = x + eps;
        let up = f(&probe);
        probe.data_mut()[i] = x - eps;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumError::NonFiniteObjective { index: i });
        }
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::new(theta.shape(), out)
}

/// Largest per-coordinate relative error between two gradients.
///
/// The denominator is floored at `1e-4` so coordinates whose true gradient is
/// near zero are compared on an absolute scale.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
