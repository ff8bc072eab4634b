//! Central finite differences, used as an independent oracle for gradients.

use super::tensor::{Element, Tensor};

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_gradient<T: Element>(x: &Tensor<T>, h: f64, mut f: impl FnMut(&Tensor<T>) -> f64) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let up = f(&probe);
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push(T::from_f64((up - down) / (2.0 * h)));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
///
/// The floor keeps entries whose true gradient is (near) zero from dominating.
pub fn max_relative_error<T: Element>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
