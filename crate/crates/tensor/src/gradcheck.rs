//! Central finite differences, used as an independent oracle for gradients.

use crate::var::{Array, Var};

/// Numerical gradient of the scalar function `f` at `x`.
pub fn numeric_grad(f: impl Fn(&Var) -> f64, x: &Array, step: f64) -> Array {
    let mut out = Array::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&Var::constant(probe.clone()));
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&Var::constant(probe.clone()));
        probe.as_slice_mut().unwrap()[i] = orig;
        out.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * step);
    }
    out
}

/// `max|a - b| / max(max|a|, max|b|, floor)`.
pub fn relative_error(a: &Array, b: &Array, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b.iter()).map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}
