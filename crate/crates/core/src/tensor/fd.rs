use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Central finite-difference gradient of a scalar function:
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate.
///
/// This is the test oracle for every analytic gradient in the crate.
pub fn finite_diff_gradient<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let two_eps = eps + eps;
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        let up = f(&Tensor::new(x.shape(), v.clone())?)?;
        v[i] = base[i] - eps;
        let down = f(&Tensor::new(x.shape(), v)?)?;
        grad.push((up - down) / two_eps);
    }
    Tensor::new(x.shape(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are
/// (near) zero.
pub fn rel_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale < 1e-300 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}
