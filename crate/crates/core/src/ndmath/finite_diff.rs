use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_difference_grad<T: Scalar>(
    mut f: impl FnMut(&[T]) -> Result<T>,
    params: &[T],
    h: T,
) -> Result<Vec<T>> {
    if !(h > T::zero()) {
        return Err(Error::invalid("h", "step must be positive"));
    }
    let mut probe = params.to_vec();
    let two_h = (h + h).to_f64_lossless();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push(T::from_f64_lossy((up.to_f64_lossless() - down.to_f64_lossless()) / two_h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; falls back to the absolute error when both
/// norms are below `1e-12`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
