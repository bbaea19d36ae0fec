//! Stride-1 "same" 2-D convolution (cross-correlation) with odd square
//! kernels, and the two adjoint operations needed to differentiate it any
//! number of times.
//!
//! With `y = conv(x, w)`:
//! * `dx = conv(dy, flip_t(w))`
//! * `dw = conv_weight(x, dy, k)`
//!
//! and `conv_weight` is linear in both arguments with adjoints expressed
//! through `conv` again, so the set is closed under differentiation.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, IxDyn};

use crate::var::{Array, Backward, Var};

fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected NCHW, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Unfolds `x` (`[n, c, h, w]`) into `[c * k * k, n * h * w]` patches.
fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_w = n * hw;
    let mut cols = vec![0.0; c * k * k * cols_w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let dst = &mut dst_row[ni * hw..(ni + 1) * hw];
                    for yi in 0..h {
                        let sy = yi as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[yi * w..(yi + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        if x0 < x1 {
                            let s0 = (x0 as isize + dx) as usize;
                            drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// `[n, c, hw]` -> `[c, n * hw]`.
fn to_channel_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            out[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n * hw]` -> `[n, c, hw]`.
fn from_channel_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for ni in 0..n {
            let src = &x[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw];
            out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

fn conv_forward(x: &Array, w: &Array) -> Array {
    let (n, c, h, wd) = dims4(x);
    let (o, wc, k, k2) = dims4(w);
    assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
    assert!(k == k2 && k % 2 == 1, "conv2d: kernel must be square and odd");
    let hw = h * wd;
    let xs = x.as_standard_layout();
    let ws = w.as_standard_layout();
    let wmat = ArrayView2::from_shape((o, c * k * k), ws.as_slice().unwrap()).unwrap();
    let mut y = vec![0.0; o * n * hw];
    let cols_owned;
    let cols: &[f64] = if k == 1 {
        cols_owned = to_channel_major(xs.as_slice().unwrap(), n, c, hw);
        &cols_owned
    } else {
        cols_owned = im2col(xs.as_slice().unwrap(), n, c, h, wd, k);
        &cols_owned
    };
    let cmat = ArrayView2::from_shape((c * k * k, n * hw), cols).unwrap();
    let mut ymat = ArrayViewMut2::from_shape((o, n * hw), &mut y).unwrap();
    general_mat_mul(1.0, &wmat, &cmat, 0.0, &mut ymat);
    Array::from_shape_vec(IxDyn(&[n, o, h, wd]), from_channel_major(&y, n, o, hw)).unwrap()
}

fn conv_weight_forward(x: &Array, dy: &Array, k: usize) -> Array {
    let (n, c, h, wd) = dims4(x);
    let (n2, o, h2, w2) = dims4(dy);
    assert_eq!((n, h, wd), (n2, h2, w2), "conv_weight: mismatched spatial shapes");
    let hw = h * wd;
    let xs = x.as_standard_layout();
    let dys = dy.as_standard_layout();
    let cols = if k == 1 {
        to_channel_major(xs.as_slice().unwrap(), n, c, hw)
    } else {
        im2col(xs.as_slice().unwrap(), n, c, h, wd, k)
    };
    let cmat = ArrayView2::from_shape((c * k * k, n * hw), &cols).unwrap();
    let dym = to_channel_major(dys.as_slice().unwrap(), n, o, hw);
    let dmat = ArrayView2::from_shape((o, n * hw), &dym).unwrap();
    let mut out = vec![0.0; o * c * k * k];
    let mut omat = ArrayViewMut2::from_shape((o, c * k * k), &mut out).unwrap();
    general_mat_mul(1.0, &dmat, &cmat.t(), 0.0, &mut omat);
    Array::from_shape_vec(IxDyn(&[o, c, k, k]), out).unwrap()
}

fn flip_t_forward(w: &Array) -> Array {
    let (o, c, k, _) = dims4(w);
    let mut out = Array::zeros(IxDyn(&[c, o, k, k]));
    for oi in 0..o {
        for ci in 0..c {
            for a in 0..k {
                for b in 0..k {
                    out[[ci, oi, k - 1 - a, k - 1 - b]] = w[[oi, ci, a, b]];
                }
            }
        }
    }
    out
}

struct Conv2d;
impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, _: &Var, p: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        let k = p[1].shape()[2];
        vec![n[0].then(|| g.conv2d(&p[1].flip_t())), n[1].then(|| p[0].conv_weight(g, k))]
    }
}

struct ConvWeight;
impl Backward for ConvWeight {
    fn name(&self) -> &'static str {
        "conv_weight"
    }
    fn backward(&self, _: &Var, p: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        // out = conv_weight(x, dy); g has the kernel's shape.
        vec![n[0].then(|| p[1].conv2d(&g.flip_t())), n[1].then(|| p[0].conv2d(g))]
    }
}

struct FlipT;
impl Backward for FlipT {
    fn name(&self) -> &'static str {
        "flip_t"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.flip_t())]
    }
}

impl Var {
    /// Cross-correlation of `self` (`[n, c, h, w]`) with `kernel`
    /// (`[o, c, k, k]`, `k` odd), zero padded to keep the spatial size.
    pub fn conv2d(&self, kernel: &Var) -> Var {
        let value = conv_forward(self.value(), kernel.value());
        Var::from_op(value, vec![self.clone(), kernel.clone()], Conv2d)
    }

    /// Kernel-shaped correlation of an input with an output gradient; the
    /// weight adjoint of [`Var::conv2d`].
    pub fn conv_weight(&self, dy: &Var, k: usize) -> Var {
        let value = conv_weight_forward(self.value(), dy.value(), k);
        Var::from_op(value, vec![self.clone(), dy.clone()], ConvWeight)
    }

    /// Swaps the channel axes of a kernel and rotates it by 180 degrees.
    pub fn flip_t(&self) -> Var {
        Var::from_op(flip_t_forward(self.value()), vec![self.clone()], FlipT)
    }
}
